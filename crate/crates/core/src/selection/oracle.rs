//! Exact set-function evaluation, exhaustive search, and the approximation
//! guarantee check for greedy selection.

use itertools::Itertools;

use super::{dot, precompute_batch_grads, CoresetResult, SelectionObjective};
use crate::error::{Error, Result};
use crate::par;

/// Evaluates `G(S) = −L(U; θ₀ − η·Σ_{m∈S} q_m)` with every `q_m` taken at `θ₀`.
pub struct GainEvaluator<'a> {
    obj: &'a dyn SelectionObjective,
    theta0: Vec<f64>,
    q: Vec<Vec<f64>>,
    eta: f64,
}

impl<'a> GainEvaluator<'a> {
    pub fn new(obj: &'a dyn SelectionObjective, eta: f64) -> Result<Self> {
        let theta0 = obj.theta0();
        let q = precompute_batch_grads(obj, &theta0)?;
        Ok(Self { obj, theta0, q, eta })
    }

    pub fn objective(&self) -> &dyn SelectionObjective {
        self.obj
    }

    pub fn batch_grads(&self) -> &[Vec<f64>] {
        &self.q
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Virtual parameters after one step on the summed gradients of `s`.
    /// The sum runs in ascending id order so the result depends on the set only.
    pub fn theta_for(&self, s: &[usize]) -> Vec<f64> {
        let mut ids = s.to_vec();
        ids.sort_unstable();
        let mut sum = vec![0.0; self.theta0.len()];
        for m in ids {
            for (acc, v) in sum.iter_mut().zip(&self.q[m]) {
                *acc += v;
            }
        }
        self.theta0.iter().zip(&sum).map(|(t, g)| t - self.eta * g).collect()
    }

    pub fn g(&self, s: &[usize]) -> Result<f64> {
        Ok(-self.obj.val_loss(&self.theta_for(s))?)
    }

    /// `G(S ∪ B) − G(S)`; zero for empty `B`.
    pub fn exact_gain(&self, s: &[usize], b: &[usize]) -> Result<f64> {
        if let Some(&m) = b.iter().find(|m| s.contains(m)) {
            return Err(Error::OverlappingSets(m));
        }
        if b.is_empty() {
            return Ok(0.0);
        }
        let union: Vec<usize> = s.iter().chain(b).copied().collect();
        Ok(self.g(&union)? - self.g(s)?)
    }

    /// First-order estimate `η·q_U(θ_S)ᵀ·Σ_{m∈B} q_m` of [`Self::exact_gain`].
    pub fn taylor_gain(&self, s: &[usize], b: &[usize]) -> Result<f64> {
        let q_u = self.obj.val_grad(&self.theta_for(s))?;
        Ok(b.iter().map(|&m| self.eta * dot(&q_u, &self.q[m])).sum())
    }
}

/// Best subset found by enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub best: Vec<usize>,
    pub g_star: f64,
    /// Number of subsets evaluated.
    pub evaluations: usize,
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc.saturating_mul((n - i) as u128) / (i as u128 + 1))
}

/// Evaluates `G` on every subset of `budget` batches and returns the best one
/// (the first in lexicographic order among ties).
pub fn exhaustive_oracle(ev: &GainEvaluator<'_>, budget: usize, cap: u128) -> Result<OracleResult> {
    let nb = ev.obj.num_batches();
    if budget > nb {
        return Err(Error::Config(format!("budget {budget} exceeds {nb} minibatches")));
    }
    let combinations = binomial(nb, budget);
    if combinations > cap {
        return Err(Error::OracleCapExceeded { combinations, cap });
    }
    let subsets: Vec<Vec<usize>> = (0..nb).combinations(budget).collect();
    let values = par::try_map_indexed(subsets.len(), |i| ev.g(&subsets[i]))?;
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    Ok(OracleResult {
        best: subsets[best].clone(),
        g_star: values[best],
        evaluations: subsets.len(),
    })
}

/// Constants of the approximation bound. Only `σ` and `γ*` are estimated;
/// the smoothness constants have no observable counterpart and stay unset.
#[derive(Debug, Clone, PartialEq)]
pub struct GuaranteeParams {
    pub sigma: f64,
    pub gamma_star: f64,
    pub lipschitz: [Option<f64>; 4],
    pub remainder: [Option<f64>; 2],
}

impl GuaranteeParams {
    pub fn from_sigma(sigma: f64) -> Self {
        Self {
            sigma,
            gamma_star: 1.0 / (2.0 * sigma - 1.0),
            lipschitz: [None; 4],
            remainder: [None; 2],
        }
    }

    /// `σ = 1 + max(0, −min G(B|S))/β` over every `S` with `|S| < budget` and
    /// every single batch `B ∉ S`, which makes each proxy gain
    /// `G(B|S) + β·σ` at least `β`.
    pub fn empirical(ev: &GainEvaluator<'_>, budget: usize) -> Result<Self> {
        let nb = ev.obj.num_batches();
        let mut cases = Vec::new();
        for size in 0..budget {
            for s in (0..nb).combinations(size) {
                for b in (0..nb).filter(|b| !s.contains(b)) {
                    cases.push((s.clone(), b));
                }
            }
        }
        let gains = par::try_map_indexed(cases.len(), |i| ev.exact_gain(&cases[i].0, &[cases[i].1]))?;
        let min = gains.iter().copied().fold(f64::INFINITY, f64::min);
        let beta = ev.obj.batch_size() as f64;
        Ok(Self::from_sigma(1.0 + (-min).max(0.0) / beta))
    }
}

/// Both sides of `G(greedy) ≥ G* − (G* + kNσ)·e^{−γ*}` and related checks.
#[derive(Debug, Clone, PartialEq)]
pub struct GuaranteeReport {
    pub g_greedy: f64,
    pub g_star: f64,
    pub g_empty: f64,
    pub sigma: f64,
    pub gamma_star: f64,
    /// Coreset size in points, `budget · β`.
    pub kn: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    /// `1 − e^{−γ*} < 0.1`: the bound says little.
    pub weak: bool,
    /// Every proxy gain along the greedy trace is positive.
    pub monotone: bool,
    /// `G(greedy) / G*`.
    pub ratio: f64,
    /// `(G(greedy) − G(∅)) / (G* − G(∅))`; 1 when `G* = G(∅)`.
    pub normalized_ratio: f64,
}

impl GuaranteeReport {
    pub fn passed(&self) -> bool {
        self.holds && self.monotone
    }
}

pub fn verify_guarantee(
    ev: &GainEvaluator<'_>,
    greedy: &CoresetResult,
    oracle: &OracleResult,
    params: &GuaranteeParams,
) -> Result<GuaranteeReport> {
    if greedy.partition_fingerprint != ev.obj.fingerprint() || greedy.num_batches != ev.obj.num_batches() {
        return Err(Error::PartitionMismatch);
    }
    let beta = ev.obj.batch_size() as f64;
    let g_greedy = ev.g(&greedy.selected)?;
    let g_empty = ev.g(&[])?;
    let g_star = oracle.g_star;
    let kn = greedy.selected.len() as f64 * beta;
    let rhs = g_star - (g_star + kn * params.sigma) * (-params.gamma_star).exp();
    let mut monotone = true;
    for i in 0..greedy.selected.len() {
        let gain = ev.exact_gain(&greedy.selected[..i], &greedy.selected[i..=i])?;
        if !(gain + beta * params.sigma > 0.0) {
            monotone = false;
        }
    }
    let denom = g_star - g_empty;
    Ok(GuaranteeReport {
        g_greedy,
        g_star,
        g_empty,
        sigma: params.sigma,
        gamma_star: params.gamma_star,
        kn,
        lhs: g_greedy,
        rhs,
        holds: g_greedy >= rhs,
        weak: 1.0 - (-params.gamma_star).exp() < 0.1,
        monotone,
        ratio: g_greedy / g_star,
        normalized_ratio: if denom == 0.0 { 1.0 } else { (g_greedy - g_empty) / denom },
    })
}
