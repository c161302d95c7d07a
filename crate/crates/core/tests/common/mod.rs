// SPDX-License-Identifier: MIT OR Apache-2.0

//! Finite-difference gradient oracle shared by the gradient tests and the
//! acceptance runner.
//!
//! The reference loss is written with plain loops and never calls into the
//! library's forward pass. Discrete choices (selection masks, the aux dead
//! selection, the JumpReLU jump) are frozen at the base point; the JumpReLU
//! threshold enters through the rectangle-smoothed step so that its exact
//! derivative is the straight-through estimate.

#![allow(dead_code, clippy::needless_range_loop)]

use batchtopk_sae::activations::ActivationVariant;
use batchtopk_sae::losses::{self, DeadLatentTracker, ObjectiveConfig};
use batchtopk_sae::sae::{self, ForwardMode, SaeParams};
use batchtopk_sae::Matrix;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-8;
/// Distance from any discontinuity below which an instance is redrawn.
pub const BOUNDARY_MARGIN: f64 = 2e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Relu,
    TopK,
    BatchTopK,
    JumpRelu,
}

impl Kind {
    pub const ALL: [Kind; 4] = [Kind::Relu, Kind::TopK, Kind::BatchTopK, Kind::JumpRelu];
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub params: SaeParams,
    pub x: Matrix,
    pub tracker: DeadLatentTracker,
    pub cfg: ObjectiveConfig,
}

/// Discrete state captured at the base point.
struct Frozen {
    keep: Vec<Vec<bool>>,
    aux_sel: Vec<Vec<bool>>,
    residual: Vec<Vec<f64>>,
    z0: Vec<Vec<f64>>,
    theta0: Vec<f64>,
}

fn gauss(rng: &mut Xoshiro256PlusPlus, rows: usize, cols: usize, std: f64) -> Matrix {
    let n = Normal::new(0.0, std).unwrap();
    let data = (0..rows * cols).map(|_| n.sample(rng)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.to_vec()).collect()
}

fn pre_acts(p: &SaeParams, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (d, m) = (p.d(), p.m());
    x.iter()
        .map(|row| {
            (0..m)
                .map(|j| {
                    let mut s = p.b_enc.get(0, j);
                    for k in 0..d {
                        let xin = if p.center_input {
                            row[k] - p.b_dec.get(0, k)
                        } else {
                            row[k]
                        };
                        s += xin * p.w_enc.get(k, j);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn smooth_step(u: f64, eps: f64) -> f64 {
    (u / eps + 0.5).clamp(0.0, 1.0)
}

/// Indices of the `k` largest `(value, index)` pairs: value descending,
/// lower index first on ties.
fn top_indices(mut items: Vec<(f64, usize)>, k: usize) -> Vec<usize> {
    items.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    items.into_iter().take(k).map(|(_, i)| i).collect()
}

fn freeze(inst: &Instance) -> Frozen {
    let p = &inst.params;
    let x = to_rows(&inst.x);
    let z = pre_acts(p, &x);
    let (b, m, d) = (x.len(), p.m(), p.d());
    let mut keep = vec![vec![false; m]; b];
    match p.variant {
        ActivationVariant::Relu => {}
        ActivationVariant::TopK { k } => {
            for i in 0..b {
                for j in top_indices(z[i].iter().copied().zip(0..m).collect(), k) {
                    keep[i][j] = true;
                }
            }
        }
        ActivationVariant::BatchTopK { k } => {
            let flat = (0..b * m).map(|f| (z[f / m][f % m], f)).collect();
            for f in top_indices(flat, b * k) {
                keep[f / m][f % m] = true;
            }
        }
        ActivationVariant::JumpRelu { .. } => {
            let th = p.theta.as_ref().unwrap();
            for i in 0..b {
                for j in 0..m {
                    keep[i][j] = z[i][j] > th.get(0, j);
                }
            }
        }
    }
    let acts = activations(p, &z, &keep);
    let residual: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            (0..d)
                .map(|c| x[i][c] - decode_entry(p, &acts[i], c, true))
                .collect()
        })
        .collect();
    let dead: Vec<usize> = (0..m).filter(|&j| inst.tracker.is_dead(j)).collect();
    let mut aux_sel = vec![vec![false; m]; b];
    if !dead.is_empty() {
        let k_eff = inst.cfg.k_aux.min(dead.len());
        for i in 0..b {
            for j in top_indices(dead.iter().map(|&j| (z[i][j], j)).collect(), k_eff) {
                aux_sel[i][j] = true;
            }
        }
    }
    Frozen {
        keep,
        aux_sel,
        residual,
        z0: z,
        theta0: p
            .theta
            .as_ref()
            .map(|t| t.data().to_vec())
            .unwrap_or_default(),
    }
}

fn activations(p: &SaeParams, z: &[Vec<f64>], keep: &[Vec<bool>]) -> Vec<Vec<f64>> {
    z.iter()
        .zip(keep)
        .map(|(zr, kr)| {
            zr.iter()
                .zip(kr)
                .map(|(&v, &k)| match p.variant {
                    ActivationVariant::Relu => v.max(0.0),
                    _ if k => v.max(0.0),
                    _ => 0.0,
                })
                .collect()
        })
        .collect()
}

fn decode_entry(p: &SaeParams, f: &[f64], c: usize, with_bias: bool) -> f64 {
    let mut s = if with_bias { p.b_dec.get(0, c) } else { 0.0 };
    for (j, &v) in f.iter().enumerate() {
        s += v * p.w_dec.get(j, c);
    }
    s
}

/// Reference objective at `p` with the base point's discrete state.
fn oracle_loss(inst: &Instance, fr: &Frozen, p: &SaeParams) -> f64 {
    let x = to_rows(&inst.x);
    let z = pre_acts(p, &x);
    let (b, m, d) = (x.len(), p.m(), p.d());
    let bf = b as f64;
    let mut f = activations(p, &z, &fr.keep);
    let mut sparsity = 0.0;
    let (lambda, alpha) = match p.variant {
        ActivationVariant::Relu | ActivationVariant::JumpRelu { .. } => (inst.cfg.lambda, 0.0),
        _ => (0.0, inst.cfg.alpha),
    };
    match p.variant {
        ActivationVariant::Relu => {
            sparsity = f.iter().flatten().sum::<f64>() / bf;
        }
        ActivationVariant::JumpRelu { bandwidth: eps } => {
            let th = p.theta.as_ref().unwrap();
            for i in 0..b {
                for j in 0..m {
                    let t = th.get(0, j);
                    let t0 = fr.theta0[j];
                    let hard = if fr.keep[i][j] { z[i][j] } else { 0.0 };
                    f[i][j] = hard
                        + t0 * (smooth_step(z[i][j] - t, eps) - smooth_step(z[i][j] - t0, eps));
                    // Hard count at the base point, smoothed dependence on theta.
                    let hard_l0 = if fr.z0[i][j] > t0 { 1.0 } else { 0.0 };
                    sparsity += hard_l0 + smooth_step(fr.z0[i][j] - t, eps)
                        - smooth_step(fr.z0[i][j] - t0, eps);
                }
            }
            sparsity /= bf;
        }
        _ => {}
    }
    let mut recon = 0.0;
    for i in 0..b {
        for c in 0..d {
            let r = x[i][c] - decode_entry(p, &f[i], c, true);
            recon += r * r;
        }
    }
    recon /= bf;
    let mut aux = 0.0;
    let any_dead = (0..m).any(|j| inst.tracker.is_dead(j));
    if alpha != 0.0 && any_dead {
        for i in 0..b {
            let a: Vec<f64> = (0..m)
                .map(|j| {
                    if fr.aux_sel[i][j] {
                        z[i][j].max(0.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            for c in 0..d {
                let r = fr.residual[i][c] - decode_entry(p, &a, c, false);
                aux += r * r;
            }
        }
        aux /= bf;
    }
    recon + lambda * sparsity + alpha * aux
}

/// Smallest distance from the base point to a discontinuity of the frozen
/// objective.
fn boundary_distance(inst: &Instance) -> f64 {
    let p = &inst.params;
    let x = to_rows(&inst.x);
    let z = pre_acts(p, &x);
    let (b, m) = (x.len(), p.m());
    let mut dist = f64::INFINITY;
    for v in z.iter().flatten() {
        dist = dist.min(v.abs());
    }
    let gap = |mut vals: Vec<f64>, k: usize| -> f64 {
        if k == 0 || k >= vals.len() {
            return f64::INFINITY;
        }
        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        vals[k - 1] - vals[k]
    };
    match p.variant {
        ActivationVariant::TopK { k } => {
            for row in &z {
                dist = dist.min(gap(row.clone(), k));
            }
        }
        ActivationVariant::BatchTopK { k } => {
            dist = dist.min(gap(z.iter().flatten().copied().collect(), b * k));
        }
        ActivationVariant::JumpRelu { bandwidth } => {
            let th = p.theta.as_ref().unwrap();
            for row in &z {
                for j in 0..m {
                    let u = row[j] - th.get(0, j);
                    dist = dist.min(u.abs()).min((u.abs() - bandwidth / 2.0).abs());
                }
            }
        }
        ActivationVariant::Relu => {}
    }
    let dead: Vec<usize> = (0..m).filter(|&j| inst.tracker.is_dead(j)).collect();
    if matches!(
        p.variant,
        ActivationVariant::TopK { .. } | ActivationVariant::BatchTopK { .. }
    ) && inst.cfg.alpha != 0.0
    {
        let k_eff = inst.cfg.k_aux.min(dead.len());
        for row in &z {
            dist = dist.min(gap(dead.iter().map(|&j| row[j]).collect(), k_eff));
        }
    }
    dist
}

/// Draws a random small instance; `None` when it lies too close to a
/// boundary.
pub fn random_instance(rng: &mut Xoshiro256PlusPlus, kind: Kind) -> Option<Instance> {
    let d = rng.random_range(1..=8);
    let m = rng.random_range(2..=16);
    let b = rng.random_range(1..=8);
    let k = rng.random_range(1..=m.min(6));
    instance_with(rng, kind, d, m, b, k)
}

/// Like [`random_instance`] with fixed shapes; `k` is ignored by ReLU and
/// JumpReLU.
pub fn instance_with(
    rng: &mut Xoshiro256PlusPlus,
    kind: Kind,
    d: usize,
    m: usize,
    b: usize,
    k: usize,
) -> Option<Instance> {
    let variant = match kind {
        Kind::Relu => ActivationVariant::Relu,
        Kind::TopK => ActivationVariant::TopK { k },
        Kind::BatchTopK => ActivationVariant::BatchTopK { k },
        Kind::JumpRelu => ActivationVariant::JumpRelu {
            bandwidth: if rng.random_bool(0.5) { 0.001 } else { 0.1 },
        },
    };
    let mut params = SaeParams {
        w_enc: gauss(rng, d, m, 0.6),
        b_enc: gauss(rng, 1, m, 0.2),
        w_dec: gauss(rng, m, d, 0.6),
        b_dec: gauss(rng, 1, d, 0.2),
        theta: None,
        variant,
        center_input: rng.random_bool(0.5),
    };
    let x = gauss(rng, b, d, 1.0);
    if let ActivationVariant::JumpRelu { bandwidth } = variant {
        let mut th: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..0.5)).collect();
        // Put some thresholds inside the kernel window of a sample.
        let z = pre_acts(&params, &to_rows(&x));
        for (j, t) in th.iter_mut().enumerate() {
            if rng.random_bool(0.5) {
                let i = rng.random_range(0..b);
                let mag = rng
                    .random_range(2.5 * BOUNDARY_MARGIN..0.5 * bandwidth - 2.5 * BOUNDARY_MARGIN);
                let off = if rng.random_bool(0.5) { mag } else { -mag };
                let cand = z[i][j] - off;
                if cand >= 0.0 {
                    *t = cand;
                }
            }
        }
        params.theta = Some(Matrix::new(1, m, th).unwrap());
    }
    let alive: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
    let mut tracker = DeadLatentTracker::new(m, 1);
    let fired = Matrix::new(
        1,
        m,
        alive.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    tracker.update(&fired);
    let cfg = ObjectiveConfig {
        lambda: rng.random_range(0.0..0.5),
        alpha: if rng.random_bool(0.5) {
            losses::DEFAULT_ALPHA
        } else {
            rng.random_range(0.1..1.0)
        },
        k_aux: rng.random_range(1..=m),
    };
    let inst = Instance {
        params,
        x,
        tracker,
        cfg,
    };
    (boundary_distance(&inst) > BOUNDARY_MARGIN).then_some(inst)
}

#[derive(Debug, Default)]
pub struct CheckReport {
    pub entries: usize,
    pub worst_ratio: f64,
    pub failures: Vec<String>,
}

fn close(a: f64, n: f64, rel_tol: f64) -> bool {
    (a - n).abs() <= rel_tol * a.abs().max(n.abs()) + ABS_FLOOR
}

/// Compares every analytic gradient entry with a central difference of the
/// reference objective; also checks the loss value itself.
pub fn check_instance(inst: &Instance) -> CheckReport {
    check_instance_tol(inst, REL_TOL)
}

pub fn check_instance_tol(inst: &Instance, rel_tol: f64) -> CheckReport {
    let mut rep = CheckReport::default();
    let fr = freeze(inst);
    let trace = sae::forward(&inst.params, &inst.x, ForwardMode::Train, None).unwrap();
    let (loss, grads) =
        losses::objective(&inst.x, &trace, &inst.tracker, &inst.params, inst.cfg).unwrap();
    let base = oracle_loss(inst, &fr, &inst.params);
    if (loss.total - base).abs() > 1e-10 * base.abs().max(1.0) {
        rep.failures.push(format!(
            "loss value: library {} vs oracle {}",
            loss.total, base
        ));
    }
    let names: Vec<&str> = inst.params.tensors().iter().map(|(n, _)| *n).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|g| g.data().to_vec()).collect();
    for (t, name) in names.iter().enumerate() {
        for idx in 0..analytic[t].len() {
            let mut plus = inst.params.clone();
            let mut minus = inst.params.clone();
            plus.tensors_mut()[t].data_mut()[idx] += FD_STEP;
            minus.tensors_mut()[t].data_mut()[idx] -= FD_STEP;
            let num =
                (oracle_loss(inst, &fr, &plus) - oracle_loss(inst, &fr, &minus)) / (2.0 * FD_STEP);
            let a = analytic[t][idx];
            rep.entries += 1;
            let allowed = rel_tol * a.abs().max(num.abs()) + ABS_FLOOR;
            rep.worst_ratio = rep.worst_ratio.max((a - num).abs() / allowed);
            if !close(a, num, rel_tol) {
                rep.failures.push(format!(
                    "{name}[{idx}]: analytic {a:.10e} vs numeric {num:.10e}"
                ));
            }
        }
    }
    rep
}

#[derive(Debug, Default)]
pub struct SuiteReport {
    pub instances: usize,
    pub redrawn: usize,
    pub entries: usize,
    pub worst_ratio: f64,
    pub failed_instances: Vec<String>,
}

/// Checks `n` valid random instances of one variant.
pub fn gradient_suite(kind: Kind, n: usize, seed: u64) -> SuiteReport {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut rep = SuiteReport::default();
    while rep.instances < n {
        let Some(inst) = random_instance(&mut rng, kind) else {
            rep.redrawn += 1;
            continue;
        };
        let r = check_instance(&inst);
        rep.instances += 1;
        rep.entries += r.entries;
        rep.worst_ratio = rep.worst_ratio.max(r.worst_ratio);
        if !r.failures.is_empty() {
            rep.failed_instances.push(format!(
                "instance {} ({:?}): {}",
                rep.instances,
                inst.params.variant,
                r.failures.join("; ")
            ));
        }
    }
    rep
}
