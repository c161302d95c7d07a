// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation sources.
//!
//! Two sources feed the trainer and the evaluator:
//!
//! - a planted sparse-dictionary generator, where every sample is a sparse
//!   non-negative combination of known unit directions plus gaussian noise;
//! - `SAEACT1` files of dumped activation vectors, streamed batch by batch.
//!
//! # `SAEACT1` layout (little-endian)
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"SAEACT1\0"
//! 8       4     u32    version (= 1)
//! 12      4     u32    d (row width)
//! 16      8     u64    n_rows
//! 24      4*d*n f32    row-major payload
//! ```
//!
//! # `SAECODE1` layout (planted ground-truth codes, little-endian)
//!
//! ```text
//! 0   8  magic b"SAECODE1"
//! 8   4  u32 version (= 1)
//! 12  4  u32 m_true
//! 16  8  u64 n_samples
//! 24  .. per sample: u32 count, then count x (u32 index, f32 coefficient)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::rng::{derive_seed, RngState};
use crate::tensor::{gauss_matrix, Matrix};

pub const ACT_MAGIC: &[u8; 8] = b"SAEACT1\0";
pub const ACT_VERSION: u32 = 1;
pub const ACT_HEADER_LEN: u64 = 24;
pub const CODE_MAGIC: &[u8; 8] = b"SAECODE1";

const STREAM_DICT: u64 = 1;
const STREAM_SAMPLE: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedDictConfig {
    pub d: usize,
    pub m_true: usize,
    pub k_min: usize,
    pub k_max: usize,
    /// Coefficients are log-uniform on `[coeff_min, coeff_max]`.
    pub coeff_min: f64,
    pub coeff_max: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PlantedDictConfig {
    fn default() -> Self {
        Self {
            d: 64,
            m_true: 256,
            k_min: 2,
            k_max: 16,
            coeff_min: 0.5,
            coeff_max: 2.0,
            noise_std: 0.01,
            seed: 0,
        }
    }
}

impl PlantedDictConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SaeError::Config(msg));
        if self.d == 0 {
            return bad("planted d must be >= 1".into());
        }
        if !(1 <= self.k_min && self.k_min <= self.k_max && self.k_max <= self.m_true) {
            return bad(format!(
                "need 1 <= k_min <= k_max <= m_true, got {}..{} of {}",
                self.k_min, self.k_max, self.m_true
            ));
        }
        if !(self.coeff_min > 0.0 && self.coeff_min <= self.coeff_max && self.coeff_max.is_finite())
        {
            return bad(format!(
                "coefficient range must satisfy 0 < min <= max, got [{}, {}]",
                self.coeff_min, self.coeff_max
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        Ok(())
    }
}

/// Sparse code of one planted sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCode {
    pub indices: Vec<u32>,
    pub coeffs: Vec<f64>,
}

/// Planted ground truth: the dictionary plus a per-sample generator.
#[derive(Clone, Debug)]
pub struct PlantedDictionary {
    cfg: PlantedDictConfig,
    dict: Arc<Matrix>,
}

impl PlantedDictionary {
    pub fn new(cfg: PlantedDictConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngState::new(derive_seed(cfg.seed, STREAM_DICT, 0));
        let mut dict = gauss_matrix(&mut rng, cfg.m_true, cfg.d, 1.0)?;
        for r in 0..dict.rows() {
            let row = dict.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self {
            cfg,
            dict: Arc::new(dict),
        })
    }

    pub fn config(&self) -> &PlantedDictConfig {
        &self.cfg
    }

    /// `m_true x d`, unit-norm rows.
    pub fn dictionary(&self) -> &Matrix {
        &self.dict
    }

    /// Draws sample `index`: the noise-free signal, the noise, and the code.
    ///
    /// Each sample has its own seeded stream, so the result depends only on
    /// `(cfg, index)` and not on how samples are batched.
    pub fn sample(&self, index: u64) -> (Vec<f64>, Vec<f64>, SparseCode) {
        let cfg = &self.cfg;
        let mut rng = RngState::new(derive_seed(cfg.seed, STREAM_SAMPLE, index));
        let size = rng.random_range(cfg.k_min..=cfg.k_max);
        let mut support: Vec<u32> = index::sample(&mut rng, cfg.m_true, size)
            .into_iter()
            .map(|j| j as u32)
            .collect();
        support.sort_unstable();
        let (lo, hi) = (cfg.coeff_min.ln(), cfg.coeff_max.ln());
        let coeffs: Vec<f64> = support
            .iter()
            .map(|_| {
                if hi > lo {
                    rng.random_range(lo..hi).exp()
                } else {
                    cfg.coeff_min
                }
            })
            .collect();
        let mut clean = vec![0.0; cfg.d];
        for (&j, &c) in support.iter().zip(&coeffs) {
            for (x, &w) in clean.iter_mut().zip(self.dict.row(j as usize)) {
                *x += c * w;
            }
        }
        let noise = if cfg.noise_std > 0.0 {
            let normal = Normal::new(0.0, cfg.noise_std).expect("validated noise_std");
            (0..cfg.d).map(|_| normal.sample(&mut rng)).collect()
        } else {
            vec![0.0; cfg.d]
        };
        (
            clean,
            noise,
            SparseCode {
                indices: support,
                coeffs,
            },
        )
    }

    /// Samples `start..start + n` as a matrix.
    pub fn batch(&self, start: u64, n: usize) -> Matrix {
        let d = self.cfg.d;
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n as u64 {
            let (clean, noise, _) = self.sample(start + i);
            data.extend(clean.iter().zip(&noise).map(|(c, e)| c + e));
        }
        Matrix::new(n, d, data).expect("finite planted data")
    }
}

/// Output of [`generate_planted`].
#[derive(Clone, Debug)]
pub struct PlantedData {
    pub data: Matrix,
    pub ground_truth_dict: Matrix,
    pub codes: Vec<SparseCode>,
}

/// Materializes the first `n_samples` planted samples with their codes.
pub fn generate_planted(cfg: &PlantedDictConfig, n_samples: usize) -> Result<PlantedData> {
    let planted = PlantedDictionary::new(cfg.clone())?;
    let mut data = Vec::with_capacity(n_samples * cfg.d);
    let mut codes = Vec::with_capacity(n_samples);
    for i in 0..n_samples as u64 {
        let (clean, noise, code) = planted.sample(i);
        data.extend(clean.iter().zip(&noise).map(|(c, e)| c + e));
        codes.push(code);
    }
    Ok(PlantedData {
        data: Matrix::new(n_samples, cfg.d, data)?,
        ground_truth_dict: (*planted.dict).clone(),
        codes,
    })
}

/// Rebuilds the noise-free signal from a dictionary and codes.
pub fn reconstruct_from_codes(dict: &Matrix, codes: &[SparseCode]) -> Matrix {
    let mut out = Matrix::zeros(codes.len(), dict.cols());
    for (r, code) in codes.iter().enumerate() {
        let row = out.row_mut(r);
        for (&j, &c) in code.indices.iter().zip(&code.coeffs) {
            for (x, &w) in row.iter_mut().zip(dict.row(j as usize)) {
                *x += c * w;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// SAEACT1 files
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActivationHeader {
    pub d: usize,
    pub n_rows: u64,
}

fn read_array<const N: usize>(r: &mut impl Read, offset: u64) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| SaeError::io_at(offset, e))?;
    Ok(buf)
}

/// Reads and checks an `SAEACT1` header, including that the file is long
/// enough to hold the advertised payload.
pub fn read_activation_header(path: &Path) -> Result<ActivationHeader> {
    let mut f = File::open(path)?;
    let file_len = f.metadata()?.len();
    if file_len < ACT_HEADER_LEN {
        return Err(SaeError::Format(format!(
            "{}: truncated header ({file_len} bytes)",
            path.display()
        )));
    }
    let magic: [u8; 8] = read_array(&mut f, 0)?;
    if &magic != ACT_MAGIC {
        return Err(SaeError::Format(format!(
            "{}: bad magic {magic:?}, expected SAEACT1",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(read_array(&mut f, 8)?);
    if version != ACT_VERSION {
        return Err(SaeError::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let d = u32::from_le_bytes(read_array(&mut f, 12)?) as usize;
    let n_rows = u64::from_le_bytes(read_array(&mut f, 16)?);
    let need = ACT_HEADER_LEN + n_rows * d as u64 * 4;
    if file_len < need {
        return Err(SaeError::Format(format!(
            "{}: truncated payload, header promises {need} bytes but file has {file_len}",
            path.display()
        )));
    }
    if d == 0 && n_rows > 0 {
        return Err(SaeError::Format(format!("{}: d is zero", path.display())));
    }
    Ok(ActivationHeader { d, n_rows })
}

/// Incremental `SAEACT1` writer; the row count is patched in on `finish`.
pub struct ActivationWriter {
    out: BufWriter<File>,
    d: usize,
    n_rows: u64,
}

impl ActivationWriter {
    pub fn create(path: &Path, d: usize) -> Result<Self> {
        let d32 = u32::try_from(d)
            .map_err(|_| SaeError::InvalidArgument(format!("d={d} exceeds u32")))?;
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(ACT_MAGIC)?;
        out.write_all(&ACT_VERSION.to_le_bytes())?;
        out.write_all(&d32.to_le_bytes())?;
        out.write_all(&0u64.to_le_bytes())?;
        Ok(Self { out, d, n_rows: 0 })
    }

    pub fn append(&mut self, rows: &Matrix) -> Result<()> {
        if rows.cols() != self.d {
            return Err(SaeError::ShapeMismatch {
                op: "write_activations",
                left: (0, self.d),
                right: rows.shape(),
            });
        }
        for &v in rows.data() {
            self.out.write_all(&(v as f32).to_le_bytes())?;
        }
        self.n_rows += rows.rows() as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<u64> {
        self.out.flush()?;
        let mut f = self.out.into_inner().map_err(|e| e.into_error())?;
        f.seek(SeekFrom::Start(16))?;
        f.write_all(&self.n_rows.to_le_bytes())?;
        f.sync_all()?;
        Ok(self.n_rows)
    }
}

pub fn write_activations(path: &Path, data: &Matrix) -> Result<()> {
    let mut w = ActivationWriter::create(path, data.cols())?;
    w.append(data)?;
    w.finish()?;
    Ok(())
}

/// Reads a whole `SAEACT1` file into memory. Meant for small files such as
/// ground-truth dictionaries; training streams through [`ActivationDataset`].
pub fn read_activations(path: &Path) -> Result<Matrix> {
    let header = read_activation_header(path)?;
    let ds = ActivationDataset::file(path, header.n_rows.max(1) as usize, None)?;
    let mut parts = Vec::new();
    for batch in ds.batches()? {
        parts.push(batch?.data);
    }
    if parts.is_empty() {
        return Ok(Matrix::zeros(0, header.d));
    }
    Matrix::vstack(&parts)
}

// ---------------------------------------------------------------------------
// Codes sidecar
// ---------------------------------------------------------------------------

pub fn write_codes(path: &Path, m_true: usize, codes: &[SparseCode]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CODE_MAGIC)?;
    out.write_all(&1u32.to_le_bytes())?;
    out.write_all(&(m_true as u32).to_le_bytes())?;
    out.write_all(&(codes.len() as u64).to_le_bytes())?;
    for code in codes {
        out.write_all(&(code.indices.len() as u32).to_le_bytes())?;
        for (&j, &c) in code.indices.iter().zip(&code.coeffs) {
            out.write_all(&j.to_le_bytes())?;
            out.write_all(&(c as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_codes(path: &Path) -> Result<(usize, Vec<SparseCode>)> {
    let mut r = BufReader::new(File::open(path)?);
    let magic: [u8; 8] = read_array(&mut r, 0)?;
    if &magic != CODE_MAGIC {
        return Err(SaeError::Format(format!(
            "{}: bad magic, expected SAECODE1",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(read_array(&mut r, 8)?);
    if version != 1 {
        return Err(SaeError::Format(format!(
            "unsupported codes version {version}"
        )));
    }
    let m_true = u32::from_le_bytes(read_array(&mut r, 12)?) as usize;
    let n = u64::from_le_bytes(read_array(&mut r, 16)?);
    let mut offset = 24u64;
    let mut codes = Vec::with_capacity(n.min(1 << 24) as usize);
    for _ in 0..n {
        let count = u32::from_le_bytes(read_array(&mut r, offset)?) as usize;
        offset += 4;
        let mut code = SparseCode {
            indices: Vec::with_capacity(count),
            coeffs: Vec::with_capacity(count),
        };
        for _ in 0..count {
            let j = u32::from_le_bytes(read_array(&mut r, offset)?);
            let c = f32::from_le_bytes(read_array(&mut r, offset + 4)?);
            offset += 8;
            if j as usize >= m_true {
                return Err(SaeError::Format(format!(
                    "code index {j} >= m_true {m_true}"
                )));
            }
            code.indices.push(j);
            code.coeffs.push(c as f64);
        }
        codes.push(code);
    }
    Ok((m_true, codes))
}

// ---------------------------------------------------------------------------
// Datasets and batch streams
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum DataSource {
    /// Samples `start..start + len` of a planted dictionary (`len = None`
    /// means unbounded).
    Planted {
        planted: PlantedDictionary,
        start: u64,
        len: Option<u64>,
    },
    File {
        path: PathBuf,
        header: ActivationHeader,
    },
}

#[derive(Clone, Debug)]
pub struct ActivationDataset {
    pub source: DataSource,
    pub batch_size: usize,
    /// Row shuffle for file sources; planted data is already i.i.d.
    pub shuffle_seed: Option<u64>,
}

/// One batch from a stream.
#[derive(Clone, Debug)]
pub struct Batch {
    pub index: u64,
    pub data: Matrix,
    /// Fewer than `batch_size` rows (the tail of a finite source).
    pub partial: bool,
}

impl ActivationDataset {
    /// Unbounded planted stream starting at sample 0.
    pub fn planted(cfg: PlantedDictConfig, batch_size: usize) -> Result<Self> {
        Self::planted_range(cfg, batch_size, 0, None)
    }

    pub fn planted_range(
        cfg: PlantedDictConfig,
        batch_size: usize,
        start: u64,
        len: Option<u64>,
    ) -> Result<Self> {
        check_batch_size(batch_size)?;
        Ok(Self {
            source: DataSource::Planted {
                planted: PlantedDictionary::new(cfg)?,
                start,
                len,
            },
            batch_size,
            shuffle_seed: None,
        })
    }

    /// `SAEACT1` file source. `expected_d`, when given, must match the header.
    pub fn file(path: &Path, batch_size: usize, expected_d: Option<usize>) -> Result<Self> {
        check_batch_size(batch_size)?;
        let header = read_activation_header(path)?;
        if let Some(d) = expected_d {
            if d != header.d {
                return Err(SaeError::Format(format!(
                    "{}: rows have width {}, expected {d}",
                    path.display(),
                    header.d
                )));
            }
        }
        Ok(Self {
            source: DataSource::File {
                path: path.to_path_buf(),
                header,
            },
            batch_size,
            shuffle_seed: None,
        })
    }

    pub fn with_shuffle(mut self, seed: Option<u64>) -> Self {
        self.shuffle_seed = seed;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Result<Self> {
        check_batch_size(batch_size)?;
        self.batch_size = batch_size;
        Ok(self)
    }

    pub fn d(&self) -> usize {
        match &self.source {
            DataSource::Planted { planted, .. } => planted.cfg.d,
            DataSource::File { header, .. } => header.d,
        }
    }

    /// Total rows, if finite.
    pub fn len(&self) -> Option<u64> {
        match &self.source {
            DataSource::Planted { len, .. } => *len,
            DataSource::File { header, .. } => Some(header.n_rows),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }

    pub fn planted_dictionary(&self) -> Option<&PlantedDictionary> {
        match &self.source {
            DataSource::Planted { planted, .. } => Some(planted),
            DataSource::File { .. } => None,
        }
    }

    /// A fresh stream from the first batch.
    pub fn batches(&self) -> Result<BatchStream> {
        BatchStream::open(self)
    }
}

fn check_batch_size(batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(SaeError::Config("batch_size must be >= 1".into()));
    }
    Ok(())
}

enum StreamState {
    Planted {
        planted: PlantedDictionary,
        start: u64,
    },
    Sequential {
        reader: BufReader<File>,
        d: usize,
    },
    Shuffled {
        file: File,
        d: usize,
        order: Vec<u64>,
    },
}

/// Deterministic batch iterator over an [`ActivationDataset`].
pub struct BatchStream {
    state: StreamState,
    batch_size: usize,
    total: Option<u64>,
    next_batch: u64,
    buf: Vec<u8>,
}

impl BatchStream {
    fn open(ds: &ActivationDataset) -> Result<Self> {
        let (state, total) = match &ds.source {
            DataSource::Planted {
                planted,
                start,
                len,
            } => (
                StreamState::Planted {
                    planted: planted.clone(),
                    start: *start,
                },
                *len,
            ),
            DataSource::File { path, header } => {
                let mut file = File::open(path)?;
                let state = match ds.shuffle_seed {
                    None => {
                        file.seek(SeekFrom::Start(ACT_HEADER_LEN))?;
                        StreamState::Sequential {
                            reader: BufReader::with_capacity(1 << 20, file),
                            d: header.d,
                        }
                    }
                    Some(seed) => {
                        let mut order: Vec<u64> = (0..header.n_rows).collect();
                        order.shuffle(&mut RngState::new(seed));
                        StreamState::Shuffled {
                            file,
                            d: header.d,
                            order,
                        }
                    }
                };
                (state, Some(header.n_rows))
            }
        };
        Ok(Self {
            state,
            batch_size: ds.batch_size,
            total,
            next_batch: 0,
            buf: Vec::new(),
        })
    }

    /// Index of the batch the next call will return.
    pub fn position(&self) -> u64 {
        self.next_batch
    }

    /// Advances past `n` batches without materializing them.
    pub fn skip_batches(&mut self, n: u64) -> Result<()> {
        if n == 0 {
            return Ok(());
        }
        if let StreamState::Sequential { reader, d } = &mut self.state {
            let bs = self.batch_size as u64;
            let from = self.next_batch * bs;
            let to = ((self.next_batch + n) * bs).min(self.total.unwrap_or(u64::MAX));
            let rows = to.saturating_sub(from);
            let skip = rows * *d as u64 * 4;
            reader.seek_relative(skip as i64)?;
        }
        self.next_batch += n;
        Ok(())
    }

    fn rows_in(&self, batch: u64) -> usize {
        let start = batch * self.batch_size as u64;
        match self.total {
            None => self.batch_size,
            Some(total) => total.saturating_sub(start).min(self.batch_size as u64) as usize,
        }
    }

    fn decode(buf: &[u8], rows: usize, d: usize, offset: u64) -> Result<Matrix> {
        let data: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Matrix::new(rows, d, data).map_err(|_| {
            SaeError::Format(format!("non-finite activation near byte offset {offset}"))
        })
    }

    pub fn next_batch(&mut self) -> Result<Option<Batch>> {
        let index = self.next_batch;
        let rows = self.rows_in(index);
        if rows == 0 {
            return Ok(None);
        }
        let start_row = index * self.batch_size as u64;
        let data = match &mut self.state {
            StreamState::Planted { planted, start } => planted.batch(*start + start_row, rows),
            StreamState::Sequential { reader, d } => {
                let offset = ACT_HEADER_LEN + start_row * *d as u64 * 4;
                self.buf.resize(rows * *d * 4, 0);
                reader
                    .read_exact(&mut self.buf)
                    .map_err(|e| SaeError::io_at(offset, e))?;
                Self::decode(&self.buf, rows, *d, offset)?
            }
            StreamState::Shuffled { file, d, order } => {
                let row_bytes = *d * 4;
                self.buf.resize(rows * row_bytes, 0);
                let ids = &order[start_row as usize..start_row as usize + rows];
                for (k, &row) in ids.iter().enumerate() {
                    let offset = ACT_HEADER_LEN + row * row_bytes as u64;
                    file.seek(SeekFrom::Start(offset))
                        .map_err(|e| SaeError::io_at(offset, e))?;
                    file.read_exact(&mut self.buf[k * row_bytes..(k + 1) * row_bytes])
                        .map_err(|e| SaeError::io_at(offset, e))?;
                }
                Self::decode(&self.buf, rows, *d, ACT_HEADER_LEN)?
            }
        };
        self.next_batch += 1;
        Ok(Some(Batch {
            index,
            data,
            partial: rows < self.batch_size,
        }))
    }
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch().transpose()
    }
}
