//! Representational divergence between a point's projection and that of its
//! worst-case perturbation.

use crate::attack::{pgd_rd, AttackConfig};
use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::error::{Error, Result};
use crate::model::{Branch, Model, Trainable};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    Kl,
    Js,
}

impl DistanceKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Some(Self::Kl),
            "js" => Some(Self::Js),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Kl => "kl",
            Self::Js => "js",
        }
    }
}

/// Distance between head outputs, compared as `softmax(out / temperature)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distance {
    pub kind: DistanceKind,
    pub temperature: f64,
}

impl Distance {
    pub fn kl() -> Self {
        Self {
            kind: DistanceKind::Kl,
            temperature: 1.0,
        }
    }

    pub fn js() -> Self {
        Self {
            kind: DistanceKind::Js,
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("distance temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

fn log_softmax_row(row: &[f64], temp: f64) -> Vec<f64> {
    let max = row.iter().map(|v| v / temp).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v / temp - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v / temp - lse).collect()
}

fn kl_logs(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter().zip(lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

fn check_same(p: &Tensor, q: &Tensor) -> Result<()> {
    if p.shape() != q.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "divergence",
            left: p.shape().to_vec(),
            right: q.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Per-row distances between two logit matrices.
pub fn distance_rows(p: &Tensor, q: &Tensor, d: &Distance) -> Result<Vec<f64>> {
    check_same(p, q)?;
    d.validate()?;
    let rows = if p.numel() == 0 { 0 } else { p.rows() };
    Ok((0..rows)
        .map(|i| {
            let lp = log_softmax_row(p.row(i), d.temperature);
            let lq = log_softmax_row(q.row(i), d.temperature);
            match d.kind {
                DistanceKind::Kl => kl_logs(&lp, &lq).max(0.0),
                DistanceKind::Js => {
                    let lm: Vec<f64> = lp
                        .iter()
                        .zip(&lq)
                        .map(|(a, b)| (0.5 * (a.exp() + b.exp())).ln())
                        .collect();
                    (0.5 * kl_logs(&lp, &lm) + 0.5 * kl_logs(&lq, &lm)).max(0.0)
                }
            }
        })
        .collect())
}

/// `KL(softmax(p/T) ‖ softmax(q/T))`, summed over rows.
pub fn kl_div(p: &Tensor, q: &Tensor, temperature: f64) -> Result<f64> {
    let d = Distance {
        kind: DistanceKind::Kl,
        temperature,
    };
    Ok(exact_sum(&distance_rows(p, q, &d)?))
}

/// Jensen-Shannon divergence against the mixture, summed over rows.
pub fn js_div(p: &Tensor, q: &Tensor, temperature: f64) -> Result<f64> {
    let d = Distance {
        kind: DistanceKind::Js,
        temperature,
    };
    Ok(exact_sum(&distance_rows(p, q, &d)?))
}

/// Differentiable distance summed over rows; both arguments are logits.
pub fn distance_var(tape: &mut Tape, p: Var, q: Var, d: &Distance) -> Result<Var> {
    d.validate()?;
    let ps = tape.scale(p, 1.0 / d.temperature);
    let qs = tape.scale(q, 1.0 / d.temperature);
    let lp = tape.log_softmax(ps)?;
    let lq = tape.log_softmax(qs)?;
    let pp = tape.exp(lp)?;
    match d.kind {
        DistanceKind::Kl => {
            let diff = tape.sub(lp, lq)?;
            let w = tape.mul(pp, diff)?;
            Ok(tape.sum(w))
        }
        DistanceKind::Js => {
            let qq = tape.exp(lq)?;
            let m = tape.add(pp, qq)?;
            let m = tape.scale(m, 0.5);
            let lm = tape.log(m)?;
            let dp = tape.sub(lp, lm)?;
            let dq = tape.sub(lq, lm)?;
            let a = tape.mul(pp, dp)?;
            let b = tape.mul(qq, dq)?;
            let s = tape.add(a, b)?;
            let s = tape.sum(s);
            Ok(tape.scale(s, 0.5))
        }
    }
}

/// Correctly rounded sum of a slice (Shewchuk partials), so the result does
/// not depend on summation order and `sum(v ++ v) == 2 · sum(v)` exactly.
pub fn exact_sum(values: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &v in values {
        let mut x = v;
        let mut keep = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[keep] = lo;
                keep += 1;
            }
            x = hi;
        }
        partials.truncate(keep);
        partials.push(x);
    }
    // Round the partials to a single value, handling the half-way case.
    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// How divergence is measured: the attack that finds `x̃`, the distance, and
/// the normalization branch used for both forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct RdConfig {
    pub attack: AttackConfig,
    pub distance: Distance,
    pub branch: Branch,
}

impl RdConfig {
    pub fn new(attack: AttackConfig) -> Self {
        Self {
            attack,
            distance: Distance::kl(),
            branch: Branch::Adversarial,
        }
    }
}

/// Per-point divergences of `u`'s rows, in row order.
pub fn rd_points(model: &Model, u: &Tensor, cfg: &RdConfig) -> Result<Vec<f64>> {
    let adv = pgd_rd(model, u, &cfg.attack, &cfg.distance, cfg.branch)?;
    let ha = model.h_values(&adv, cfg.branch)?;
    let hn = model.h_values(u, cfg.branch)?;
    distance_rows(&ha, &hn, &cfg.distance)
}

/// Divergence of a single point.
pub fn rd_point(model: &Model, x: &[f64], cfg: &RdConfig) -> Result<f64> {
    let t = Tensor::matrix(1, x.len(), x.to_vec())?;
    Ok(rd_points(model, &t, cfg)?[0])
}

const RD_CHUNK: usize = 64;

fn chunks(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(RD_CHUNK))
        .map(|c| (c * RD_CHUNK, ((c + 1) * RD_CHUNK).min(n)))
        .collect()
}

fn check_nonempty(u: &Tensor) -> Result<()> {
    if u.rank() != 2 || u.shape()[0] == 0 {
        return Err(Error::EmptySet("validation set"));
    }
    Ok(())
}

/// `Σ_{x ∈ U} d(h(x̃), h(x))`. Points are attacked in parallel chunks and the
/// per-point values are combined with [`exact_sum`].
pub fn rd_set(model: &Model, u: &Tensor, cfg: &RdConfig) -> Result<f64> {
    check_nonempty(u)?;
    let parts = chunks(u.rows());
    let vals = par::try_map_indexed(parts.len(), |c| {
        let (a, b) = parts[c];
        let idx: Vec<usize> = (a..b).collect();
        rd_points(model, &u.select_rows(&idx), cfg)
    })?;
    Ok(exact_sum(&vals.concat()))
}

/// Value and parameter gradient of [`rd_set`]. `x̃` is treated as a
/// constant; both `h(x̃)` and `h(x)` are differentiated. With
/// `Trainable::HeadOnly` the gradient covers the head coordinates only.
pub fn rd_set_grad(model: &Model, u: &Tensor, cfg: &RdConfig, trainable: Trainable) -> Result<(f64, Vec<f64>)> {
    check_nonempty(u)?;
    let parts = chunks(u.rows());
    let results = par::try_map_indexed(parts.len(), |c| -> Result<(Vec<f64>, Vec<f64>)> {
        let (a, b) = parts[c];
        let idx: Vec<usize> = (a..b).collect();
        let x = u.select_rows(&idx);
        let adv = pgd_rd(model, &x, &cfg.attack, &cfg.distance, cfg.branch)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, trainable);
        let xa = tape.constant(adv);
        let xn = tape.constant(x);
        let ha = model.forward(&mut tape, &bound, xa, cfg.branch)?;
        let hn = model.forward(&mut tape, &bound, xn, cfg.branch)?;
        let vals = distance_rows(tape.value(ha), tape.value(hn), &cfg.distance)?;
        let d = distance_var(&mut tape, ha, hn, &cfg.distance)?;
        tape.backward(d)?;
        Ok((vals, model.collect_grad(&tape, &bound)))
    })?;
    let mut grad = vec![0.0; results[0].1.len()];
    let mut vals = Vec::with_capacity(u.rows());
    for (v, g) in results {
        vals.extend(v);
        for (acc, x) in grad.iter_mut().zip(g) {
            *acc += x;
        }
    }
    Ok((exact_sum(&vals), grad))
}
