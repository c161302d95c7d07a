// SPDX-License-Identifier: MIT OR Apache-2.0

//! `SAEPARM1` checkpoint container.
//!
//! A fixed header and the parameters as `f32`, followed by optional tagged
//! sections. Readers skip tags they do not know.
//!
//! ```text
//! Header (little-endian)
//!   [u8; 8]  magic  b"SAEPARM1"
//!   u32      format version (= 1)
//!   u32      d
//!   u32      m
//!   u8       variant tag: 0 relu, 1 topk, 2 batchtopk, 3 jumprelu
//!   u8       flags: bit 0 center_input, bit 1 theta_global present
//!   u16      reserved (0)
//!   u32      k (0 when not applicable)
//!   f32      lambda (sparsity coefficient, 0 when not applicable)
//!   f32      JumpReLU bandwidth (0 when not applicable)
//!   f32      input scale applied to activations before encoding
//!   f32      theta_global
//!   u64      batches folded into theta_global
//!   u32      theta length (m for JumpReLU, else 0), then that many f32
//!   f32      w_enc  d x m, row-major
//!   f32      b_enc  m
//!   f32      w_dec  m x d, row-major
//!   f32      b_dec  d
//!
//! Sections, repeated until EOF:  [u8; 4] tag, u64 byte length, payload
//!   "PF64"  exact f64 copies: w_enc, b_enc, w_dec, b_dec, theta, then
//!           f64 theta_global, f64 input scale, f64 bandwidth (JumpReLU)
//!   "ADAM"  u32 count; per tensor: u32 rows, u32 cols, u64 step,
//!           f64 lr, beta1, beta2, eps, then f64 m1 and f64 m2
//!   "TRNR"  u64 step, u64 tokens_seen, u64 dead_threshold_tokens,
//!           u32 m, u64 tokens_since_fire[m], u32 n, f64 minima[n],
//!           u8 has_ema, f64 ema
//! ```
//!
//! Loaders prefer the `PF64` values when present, so a resumed run continues
//! from exactly the state that was saved.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::activations::{ActivationVariant, ThresholdEstimate};
use crate::error::{Result, SaeError};
use crate::losses::DeadLatentTracker;
use crate::optim::{AdamConfig, AdamState};
use crate::sae::SaeParams;
use crate::tensor::Matrix;

pub const PARAM_MAGIC: &[u8; 8] = b"SAEPARM1";
pub const PARAM_VERSION: u32 = 1;

/// Training progress needed to resume a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerProgress {
    pub step: u64,
    pub tokens_seen: u64,
    pub tracker: DeadLatentTracker,
    /// Per-batch minimum positive activations in the threshold window.
    pub minima_window: Vec<f64>,
    pub ema_threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: SaeParams,
    /// Sparsity coefficient the model was trained with, if any.
    pub lambda: Option<f64>,
    pub input_scale: f64,
    pub threshold: Option<ThresholdEstimate>,
    /// One state per tensor of [`SaeParams::tensors`], empty if not saved.
    pub adam: Vec<AdamState>,
    pub progress: Option<TrainerProgress>,
}

impl Checkpoint {
    pub fn new(params: SaeParams) -> Self {
        Self {
            params,
            lambda: None,
            input_scale: 1.0,
            threshold: None,
            adam: Vec::new(),
            progress: None,
        }
    }

    pub fn theta_global(&self) -> Option<f64> {
        self.threshold.as_ref().map(|t| t.theta_global())
    }
}

fn variant_tag(v: &ActivationVariant) -> u8 {
    match v {
        ActivationVariant::Relu => 0,
        ActivationVariant::TopK { .. } => 1,
        ActivationVariant::BatchTopK { .. } => 2,
        ActivationVariant::JumpRelu { .. } => 3,
    }
}

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, m: &Matrix) {
        m.data().iter().for_each(|&v| self.f32(v));
    }
    fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|&v| self.f64(v));
    }
    fn section(&mut self, tag: &[u8; 4], body: Enc) {
        self.0.extend_from_slice(tag);
        self.u64(body.0.len() as u64);
        self.0.extend_from_slice(&body.0);
    }
}

fn dim32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| SaeError::InvalidArgument(format!("dimension {n} exceeds u32")))
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let p = &ck.params;
    p.validate()?;
    let mut e = Enc(Vec::new());
    e.0.extend_from_slice(PARAM_MAGIC);
    e.u32(PARAM_VERSION);
    e.u32(dim32(p.d())?);
    e.u32(dim32(p.m())?);
    e.u8(variant_tag(&p.variant));
    let mut flags = 0u8;
    if p.center_input {
        flags |= 1;
    }
    if ck.threshold.is_some() {
        flags |= 2;
    }
    e.u8(flags);
    e.u16(0);
    e.u32(dim32(p.variant.k().unwrap_or(0))?);
    e.f32(ck.lambda.unwrap_or(0.0));
    e.f32(match p.variant {
        ActivationVariant::JumpRelu { bandwidth } => bandwidth,
        _ => 0.0,
    });
    e.f32(ck.input_scale);
    let theta_global = ck.theta_global().unwrap_or(0.0);
    e.f32(theta_global);
    e.u64(ck.threshold.as_ref().map_or(0, |t| t.batches_seen()));
    match &p.theta {
        Some(t) => {
            e.u32(dim32(t.cols())?);
            e.f32s(t);
        }
        None => e.u32(0),
    }
    e.f32s(&p.w_enc);
    e.f32s(&p.b_enc);
    e.f32s(&p.w_dec);
    e.f32s(&p.b_dec);

    let mut exact = Enc(Vec::new());
    for (_, t) in p.tensors() {
        exact.f64s(t.data());
    }
    exact.f64(theta_global);
    exact.f64(ck.input_scale);
    if let ActivationVariant::JumpRelu { bandwidth } = p.variant {
        exact.f64(bandwidth);
    }
    e.section(b"PF64", exact);

    if !ck.adam.is_empty() {
        let mut a = Enc(Vec::new());
        a.u32(ck.adam.len() as u32);
        for s in &ck.adam {
            a.u32(dim32(s.m1.rows())?);
            a.u32(dim32(s.m1.cols())?);
            a.u64(s.step_count);
            a.f64(s.cfg.lr);
            a.f64(s.cfg.beta1);
            a.f64(s.cfg.beta2);
            a.f64(s.cfg.eps);
            a.f64s(s.m1.data());
            a.f64s(s.m2.data());
        }
        e.section(b"ADAM", a);
    }

    if let Some(pr) = &ck.progress {
        let mut t = Enc(Vec::new());
        t.u64(pr.step);
        t.u64(pr.tokens_seen);
        t.u64(pr.tracker.dead_threshold_tokens());
        let counters = pr.tracker.tokens_since_fire();
        t.u32(dim32(counters.len())?);
        counters.iter().for_each(|&c| t.u64(c));
        t.u32(dim32(pr.minima_window.len())?);
        t.f64s(&pr.minima_window);
        t.u8(pr.ema_threshold.is_some() as u8);
        t.f64(pr.ema_threshold.unwrap_or(0.0));
        e.section(b"TRNR", t);
    }
    Ok(e.0)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(SaeError::Format(format!(
                "checkpoint truncated at byte {} (needed {n} more bytes)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.arr::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.arr()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.arr()?) as f64)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn f32_matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows * cols;
        let bytes = self.take(n * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Matrix::new(rows, cols, data).map_err(|e| SaeError::Format(e.to_string()))
    }
    fn f64_matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let bytes = self.take(rows * cols * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::new(rows, cols, data).map_err(|e| SaeError::Format(e.to_string()))
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Dec { buf: bytes, pos: 0 };
    let magic: [u8; 8] = r.arr()?;
    if &magic != PARAM_MAGIC {
        return Err(SaeError::Format(format!(
            "bad checkpoint magic {magic:?}, expected SAEPARM1"
        )));
    }
    let version = r.u32()?;
    if version != PARAM_VERSION {
        return Err(SaeError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let d = r.u32()? as usize;
    let m = r.u32()? as usize;
    let tag = r.u8()?;
    let flags = r.u8()?;
    let _reserved = r.u16()?;
    let k = r.u32()? as usize;
    let lambda = r.f32()?;
    let bandwidth = r.f32()?;
    let mut input_scale = r.f32()?;
    let mut theta_global = r.f32()?;
    let threshold_batches = r.u64()?;
    let variant = match tag {
        0 => ActivationVariant::Relu,
        1 => ActivationVariant::TopK { k },
        2 => ActivationVariant::BatchTopK { k },
        3 => ActivationVariant::JumpRelu { bandwidth },
        t => return Err(SaeError::Format(format!("unknown variant tag {t}"))),
    };
    let theta_len = r.u32()? as usize;
    let theta = if theta_len > 0 {
        Some(r.f32_matrix(1, theta_len)?)
    } else {
        None
    };
    let mut params = SaeParams {
        w_enc: r.f32_matrix(d, m)?,
        b_enc: r.f32_matrix(1, m)?,
        w_dec: r.f32_matrix(m, d)?,
        b_dec: r.f32_matrix(1, d)?,
        theta,
        variant,
        center_input: flags & 1 != 0,
    };

    let mut adam = Vec::new();
    let mut progress = None;
    while !r.done() {
        let tag: [u8; 4] = r.arr()?;
        let len = r.u64()? as usize;
        let body = r.take(len)?;
        let mut s = Dec { buf: body, pos: 0 };
        match &tag {
            b"PF64" => {
                params.w_enc = s.f64_matrix(d, m)?;
                params.b_enc = s.f64_matrix(1, m)?;
                params.w_dec = s.f64_matrix(m, d)?;
                params.b_dec = s.f64_matrix(1, d)?;
                if params.theta.is_some() {
                    params.theta = Some(s.f64_matrix(1, theta_len)?);
                }
                theta_global = s.f64()?;
                input_scale = s.f64()?;
                if let ActivationVariant::JumpRelu { bandwidth } = &mut params.variant {
                    if !s.done() {
                        *bandwidth = s.f64()?;
                    }
                }
            }
            b"ADAM" => {
                let n = s.u32()? as usize;
                for _ in 0..n {
                    let rows = s.u32()? as usize;
                    let cols = s.u32()? as usize;
                    let step_count = s.u64()?;
                    let cfg = AdamConfig {
                        lr: s.f64()?,
                        beta1: s.f64()?,
                        beta2: s.f64()?,
                        eps: s.f64()?,
                    };
                    let m1 = s.f64_matrix(rows, cols)?;
                    let m2 = s.f64_matrix(rows, cols)?;
                    adam.push(AdamState {
                        m1,
                        m2,
                        step_count,
                        cfg,
                    });
                }
            }
            b"TRNR" => {
                let step = s.u64()?;
                let tokens_seen = s.u64()?;
                let dead_threshold = s.u64()?;
                let n = s.u32()? as usize;
                let counters = (0..n).map(|_| s.u64()).collect::<Result<Vec<_>>>()?;
                let w = s.u32()? as usize;
                let minima = (0..w).map(|_| s.f64()).collect::<Result<Vec<_>>>()?;
                let has_ema = s.u8()? != 0;
                let ema = s.f64()?;
                progress = Some(TrainerProgress {
                    step,
                    tokens_seen,
                    tracker: DeadLatentTracker::from_parts(counters, dead_threshold),
                    minima_window: minima,
                    ema_threshold: has_ema.then_some(ema),
                });
            }
            other => log::debug!("skipping unknown checkpoint section {other:?}"),
        }
    }
    params.validate()?;
    if !adam.is_empty() {
        let shapes: Vec<_> = params.tensors().iter().map(|(_, t)| t.shape()).collect();
        let got: Vec<_> = adam.iter().map(|a| a.m1.shape()).collect();
        if shapes != got {
            return Err(SaeError::Format(format!(
                "optimizer state shapes {got:?} do not match parameters {shapes:?}"
            )));
        }
    }
    let threshold =
        (flags & 2 != 0).then(|| ThresholdEstimate::from_parts(theta_global, threshold_batches));
    Ok(Checkpoint {
        params,
        lambda: (lambda != 0.0).then_some(lambda),
        input_scale,
        threshold,
        adam,
        progress,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use crate::sae::init_params;

    fn sample(variant: ActivationVariant) -> Checkpoint {
        let mut p = init_params(&mut RngState::new(2), 5, 9, variant).unwrap();
        p.b_enc = Matrix::filled(1, 9, 0.125);
        let adam = p
            .tensors()
            .iter()
            .map(|(_, t)| AdamState::for_param(t, AdamConfig::default()))
            .collect();
        Checkpoint {
            params: p,
            lambda: Some(0.5),
            input_scale: 1.0,
            threshold: Some(ThresholdEstimate::from_minima(&[0.2, 0.3])),
            adam,
            progress: Some(TrainerProgress {
                step: 7,
                tokens_seen: 700,
                tracker: DeadLatentTracker::from_parts(vec![1; 9], 50),
                minima_window: vec![0.2, 0.3],
                ema_threshold: Some(0.25),
            }),
        }
    }

    #[test]
    fn round_trip_all_variants() {
        for v in [
            ActivationVariant::Relu,
            ActivationVariant::TopK { k: 3 },
            ActivationVariant::BatchTopK { k: 2 },
            ActivationVariant::JumpRelu { bandwidth: 0.001 },
        ] {
            let ck = sample(v);
            let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
            assert_eq!(back.params, ck.params);
            assert_eq!(back.adam, ck.adam);
            assert_eq!(back.progress, ck.progress);
            assert!((back.theta_global().unwrap() - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn f32_only_payload_matches_at_f32() {
        let ck = sample(ActivationVariant::TopK { k: 3 });
        let bytes = encode_checkpoint(&Checkpoint {
            adam: vec![],
            progress: None,
            ..ck.clone()
        })
        .unwrap();
        // Drop every section: header + f32 tensors remain.
        let header_len = bytes.windows(4).position(|w| w == b"PF64").unwrap();
        let back = decode_checkpoint(&bytes[..header_len]).unwrap();
        for ((_, a), (_, b)) in back.params.tensors().iter().zip(ck.params.tensors()) {
            assert_eq!(**a, b.map(|v| v as f32 as f64));
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_checkpoint(&sample(ActivationVariant::Relu)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode_checkpoint(&bad)
            .unwrap_err()
            .to_string()
            .contains("version"));
        for cut in [10, 40, bytes.len() - 3] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(err.to_string().contains("truncated"), "{err}");
        }
    }

    #[test]
    fn unknown_sections_are_skipped() {
        let ck = sample(ActivationVariant::BatchTopK { k: 2 });
        let mut bytes = encode_checkpoint(&ck).unwrap();
        bytes.extend_from_slice(b"XTRA");
        bytes.extend_from_slice(&3u64.to_le_bytes());
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(decode_checkpoint(&bytes).unwrap().params, ck.params);
    }
}
