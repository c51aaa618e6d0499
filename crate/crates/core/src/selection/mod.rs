//! Greedy minibatch coreset selection.
//!
//! A round starts from a frozen `θ₀`. Every minibatch gradient `q_m` is
//! computed once at `θ₀`. Then, for each of `⌊kN/β⌋` iterations, the
//! validation gradient `q_U` is evaluated at the current virtual parameters,
//! the remaining batch maximizing `η·q_Uᵀq_m` is taken (lowest id on ties),
//! and the virtual parameters move by `−η·q_m`. The batch gradients are not
//! refreshed as the virtual parameters drift.

mod objective;
mod oracle;

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::index;

pub use objective::{BatchLoss, ModelObjective, QuadraticObjective, SelectionObjective};
pub use oracle::{exhaustive_oracle, verify_guarantee, GainEvaluator, GuaranteeParams, GuaranteeReport, OracleResult};

use crate::autodiff::TensorError;
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, tags};

/// Default cap on the number of subsets the exhaustive oracle may enumerate.
pub const ORACLE_CAP: u128 = 10_000;

/// Outcome of one selection round.
#[derive(Debug, Clone, PartialEq)]
pub struct CoresetResult {
    /// Selected batch ids in selection order.
    pub selected: Vec<usize>,
    /// `η·q_Uᵀq_m` of each pick; NaN when the method has no gains.
    pub gains: Vec<f64>,
    /// Gradient evaluations performed up to and including each pick.
    pub cumulative_evals: Vec<u64>,
    pub grad_evals: u64,
    pub wall_time: Duration,
    /// Norm of the total virtual parameter displacement.
    pub theta_drift: f64,
    pub num_batches: usize,
    pub partition_fingerprint: u64,
}

impl CoresetResult {
    /// Writes `iteration,batch_id,gain,cumulative_grad_evals` rows. NaN gains
    /// are written as empty fields.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["iteration", "batch_id", "gain", "cumulative_grad_evals"])?;
        for (i, ((id, g), c)) in self.selected.iter().zip(&self.gains).zip(&self.cumulative_evals).enumerate() {
            let gain = if g.is_nan() { String::new() } else { g.to_string() };
            w.write_record([i.to_string(), id.to_string(), gain, c.to_string()])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// `⌊k·N/β⌋`, computed with a small tolerance so products that are whole
/// numbers in exact arithmetic are not floored one too low.
pub fn selection_budget(n_points: usize, batch_size: usize, k: f64) -> Result<usize> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::Config(format!("subset fraction must lie in (0, 1], got {k}")));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let b = (k * n_points as f64 / batch_size as f64 + 1e-9).floor() as usize;
    if b == 0 {
        return Err(Error::FractionTooSmall {
            fraction: k,
            n: n_points,
            batch_size,
        });
    }
    Ok(b)
}

/// `η·q_Uᵀq_m`.
pub fn taylor_gain(q_u: &[f64], q_m: &[f64], eta: f64) -> Result<f64> {
    if q_u.len() != q_m.len() {
        return Err(TensorError::ShapeMismatch {
            op: "taylor_gain",
            left: vec![q_u.len()],
            right: vec![q_m.len()],
        }
        .into());
    }
    Ok(eta * dot(q_u, q_m))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_finite(v: &[f64], batch: Option<usize>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        return Ok(());
    }
    Err(match batch {
        Some(b) => Error::NonFiniteBatchGradient { batch: b },
        None => TensorError::Domain {
            op: "validation gradient",
            detail: "non-finite entry".into(),
        }
        .into(),
    })
}

/// Computes every `q_m` at `θ` in parallel.
pub fn precompute_batch_grads(obj: &dyn SelectionObjective, theta: &[f64]) -> Result<Vec<Vec<f64>>> {
    par::try_map_indexed(obj.num_batches(), |m| {
        let g = obj.batch_grad(theta, m)?;
        check_finite(&g, Some(m))?;
        Ok(g)
    })
}

/// Greedy selection of `⌊kN/β⌋` batches.
pub fn rcs_greedy(obj: &dyn SelectionObjective, k: f64, eta: f64) -> Result<CoresetResult> {
    let budget = selection_budget(obj.num_points(), obj.batch_size(), k)?;
    greedy_with_budget(obj, budget, eta)
}

/// Greedy selection with an explicit iteration count.
pub fn greedy_with_budget(obj: &dyn SelectionObjective, budget: usize, eta: f64) -> Result<CoresetResult> {
    let start = Instant::now();
    let nb = obj.num_batches();
    if budget > nb {
        return Err(Error::Config(format!("budget {budget} exceeds {nb} minibatches")));
    }
    let theta0 = obj.theta0();
    let q = precompute_batch_grads(obj, &theta0)?;
    let mut evals = nb as u64;
    let mut theta = theta0.clone();
    let mut remaining = vec![true; nb];
    let (mut selected, mut gains, mut cumulative) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..budget {
        let q_u = obj.val_grad(&theta)?;
        check_finite(&q_u, None)?;
        evals += 1;
        let mut best: Option<(usize, f64)> = None;
        for m in (0..nb).filter(|&m| remaining[m]) {
            let g = taylor_gain(&q_u, &q[m], eta)?;
            if best.is_none_or(|(_, bg)| g > bg) {
                best = Some((m, g));
            }
        }
        let (s, g) = best.expect("budget never exceeds the batch count");
        remaining[s] = false;
        for (t, qs) in theta.iter_mut().zip(&q[s]) {
            *t -= eta * qs;
        }
        selected.push(s);
        gains.push(g);
        cumulative.push(evals);
    }
    let drift = theta.iter().zip(&theta0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(CoresetResult {
        selected,
        gains,
        cumulative_evals: cumulative,
        grad_evals: evals,
        wall_time: start.elapsed(),
        theta_drift: drift,
        num_batches: nb,
        partition_fingerprint: obj.fingerprint(),
    })
}

/// A contiguous range of another objective's batches.
struct ChunkView<'a> {
    inner: &'a dyn SelectionObjective,
    ids: Vec<usize>,
}

impl SelectionObjective for ChunkView<'_> {
    fn theta0(&self) -> Vec<f64> {
        self.inner.theta0()
    }
    fn num_batches(&self) -> usize {
        self.ids.len()
    }
    fn batch_len(&self, m: usize) -> usize {
        self.inner.batch_len(self.ids[m])
    }
    fn batch_size(&self) -> usize {
        self.inner.batch_size()
    }
    fn batch_grad(&self, theta: &[f64], m: usize) -> Result<Vec<f64>> {
        self.inner.batch_grad(theta, self.ids[m]).map_err(|e| match e {
            Error::NonFiniteBatchGradient { .. } => Error::NonFiniteBatchGradient { batch: self.ids[m] },
            other => other,
        })
    }
    fn val_loss(&self, theta: &[f64]) -> Result<f64> {
        self.inner.val_loss(theta)
    }
    fn val_grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.inner.val_grad(theta)
    }
}

/// Per-chunk budgets `⌊k·N_c/β⌋` for chunks of `chunk` consecutive batches,
/// where `N_c` counts the points in chunk `c`. A single chunk reproduces
/// [`selection_budget`].
pub fn chunk_budgets(obj: &dyn SelectionObjective, k: f64, chunk: usize) -> Result<Vec<usize>> {
    if chunk == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    let nb = obj.num_batches();
    (0..nb.div_ceil(chunk))
        .map(|c| {
            let pts: usize = (c * chunk..((c + 1) * chunk).min(nb)).map(|m| obj.batch_len(m)).sum();
            selection_budget(pts, obj.batch_size(), k)
        })
        .collect()
}

/// Greedy selection run independently on chunks of `chunk` batches; the
/// virtual parameters restart from `θ₀` in every chunk.
pub fn chunked_select(obj: &dyn SelectionObjective, k: f64, eta: f64, chunk: usize) -> Result<CoresetResult> {
    let start = Instant::now();
    let budgets = chunk_budgets(obj, k, chunk)?;
    let nb = obj.num_batches();
    let mut out = CoresetResult {
        selected: Vec::new(),
        gains: Vec::new(),
        cumulative_evals: Vec::new(),
        grad_evals: 0,
        wall_time: Duration::ZERO,
        theta_drift: 0.0,
        num_batches: nb,
        partition_fingerprint: obj.fingerprint(),
    };
    for (c, &budget) in budgets.iter().enumerate() {
        let view = ChunkView {
            inner: obj,
            ids: (c * chunk..((c + 1) * chunk).min(nb)).collect(),
        };
        let r = greedy_with_budget(&view, budget, eta)?;
        out.selected.extend(r.selected.iter().map(|&m| view.ids[m]));
        out.gains.extend(r.gains);
        out.cumulative_evals.extend(r.cumulative_evals.iter().map(|e| e + out.grad_evals));
        out.grad_evals += r.grad_evals;
        out.theta_drift += r.theta_drift;
    }
    out.wall_time = start.elapsed();
    Ok(out)
}

/// Uniform sample of `⌊kN/β⌋` batch ids without replacement. Costs no
/// gradient evaluations.
pub fn random_select(
    num_batches: usize,
    n_points: usize,
    batch_size: usize,
    k: f64,
    seed: u64,
    fingerprint: u64,
) -> Result<CoresetResult> {
    let start = Instant::now();
    let budget = selection_budget(n_points, batch_size, k)?.min(num_batches);
    let mut r = rng::rng(rng::derive_seed(seed, tags::RANDOM_SELECT, 0));
    let selected = index::sample(&mut r, num_batches, budget).into_vec();
    Ok(CoresetResult {
        gains: vec![f64::NAN; selected.len()],
        cumulative_evals: vec![0; selected.len()],
        selected,
        grad_evals: 0,
        wall_time: start.elapsed(),
        theta_drift: 0.0,
        num_batches,
        partition_fingerprint: fingerprint,
    })
}

#[cfg(test)]
mod tests;
