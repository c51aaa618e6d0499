//! Projected sign-gradient attacks inside an `ℓ∞` ball.
//!
//! Every step is `x ← Π(x + ρ·sign(∇))` where `Π` clamps to the optional
//! domain interval and then to `[x0 − ε, x0 + ε]`. Gradients are taken on a
//! private tape with the model bound as constants, so attacks never leave
//! gradients on the caller's parameters.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{sign, Tape, Tensor, Var};
use crate::divergence::{distance_var, Distance};
use crate::error::{Error, Result};
use crate::model::{Branch, Model, Trainable};
use crate::rng::{self, tags};

/// Scale of the Gaussian start used by [`pgd_rd`]. The divergence has a
/// zero gradient at its own anchor, so the ascent needs a nudge off it.
pub const RD_JITTER: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub steps: usize,
    pub step_size: f64,
    pub eps: f64,
    pub clamp: Option<(f64, f64)>,
    /// Start from a uniform point in the ball instead of the input.
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(steps: usize, step_size: f64, eps: f64) -> Self {
        Self {
            steps,
            step_size,
            eps,
            clamp: None,
            random_start: false,
            seed: 0,
        }
    }

    pub fn identity() -> Self {
        Self::new(0, 1.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("attack step size must be positive, got {}", self.step_size)));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("attack budget must be non-negative, got {}", self.eps)));
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo <= hi) {
                return Err(Error::Config(format!("clamp interval [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.steps == 0 || self.eps == 0.0
    }

    /// Same budget with `steps` steps and the step size rescaled to keep
    /// `steps · step_size` constant.
    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        let mut c = self.clone();
        c.step_size = rcs_step_size(self.step_size, self.steps, steps)?;
        c.steps = steps;
        Ok(c)
    }
}

/// `ρ_train · T_train / T_rcs`.
pub fn rcs_step_size(rho: f64, t_train: usize, t_rcs: usize) -> Result<f64> {
    if t_rcs == 0 {
        return Err(Error::Config("selection attack steps must be at least 1".into()));
    }
    Ok(rho * t_train as f64 / t_rcs as f64)
}

static CALLS: AtomicU64 = AtomicU64::new(0);
static VIOLATIONS: AtomicU64 = AtomicU64::new(0);

/// Process-wide tally of attack outputs checked and ball violations found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditCounts {
    pub calls: u64,
    pub violations: u64,
}

pub fn audit_counts() -> AuditCounts {
    AuditCounts {
        calls: CALLS.load(Ordering::Relaxed),
        violations: VIOLATIONS.load(Ordering::Relaxed),
    }
}

fn audit(x0: &Tensor, x: &Tensor, eps: f64) {
    CALLS.fetch_add(1, Ordering::Relaxed);
    let bad = x0.data().iter().zip(x.data()).any(|(a, b)| !((a - b).abs() <= eps + 1e-12));
    if bad {
        VIOLATIONS.fetch_add(1, Ordering::Relaxed);
    }
}

fn project(x: &mut [f64], x0: &[f64], cfg: &AttackConfig) {
    for (v, &o) in x.iter_mut().zip(x0) {
        if let Some((lo, hi)) = cfg.clamp {
            *v = v.clamp(lo, hi);
        }
        *v = v.clamp(o - cfg.eps, o + cfg.eps);
    }
}

fn ascend(x: &mut Tensor, g: &Tensor, x0: &Tensor, cfg: &AttackConfig, step: usize) -> Result<()> {
    if !g.is_finite() {
        return Err(Error::AttackNonFinite { step });
    }
    for (v, gv) in x.data_mut().iter_mut().zip(g.data()) {
        *v += cfg.step_size * sign(*gv);
    }
    project(x.data_mut(), x0.data(), cfg);
    Ok(())
}

fn uniform_start(x0: &Tensor, cfg: &AttackConfig, stream: u64) -> Tensor {
    let mut r = rng::rng(rng::derive_seed(cfg.seed, tags::ATTACK, stream));
    let mut x = x0.clone();
    for v in x.data_mut() {
        *v += r.random_range(-cfg.eps..=cfg.eps);
    }
    project(x.data_mut(), x0.data(), cfg);
    x
}

fn check_pair(xi: &Tensor, xj: &Tensor) -> Result<()> {
    if xi.shape() != xj.shape() || xi.rank() != 2 {
        return Err(crate::autodiff::TensorError::ShapeMismatch {
            op: "pgd_pair",
            left: xi.shape().to_vec(),
            right: xj.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Contrastive pair attack.
///
/// Both views ascend the contrastive loss of the `2β` augmented batch at the
/// same time. The positive for each anchor is its evolving partner view;
/// all other entries in the denominator are the step-0 projections, held
/// fixed while the pair moves.
pub fn pgd_pair(
    model: &Model,
    xi: &Tensor,
    xj: &Tensor,
    cfg: &AttackConfig,
    temperature: f64,
    branch: Branch,
) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    check_pair(xi, xj)?;
    if cfg.is_identity() || xi.rows() == 0 {
        audit(xi, xi, cfg.eps);
        audit(xj, xj, cfg.eps);
        return Ok((xi.clone(), xj.clone()));
    }
    let beta = xi.rows();
    let both = xi.concat_rows(xj)?;
    let frozen = {
        let mut tape = Tape::new();
        let h = model.h_values(&both, branch)?;
        let hv = tape.constant(h);
        let n = tape.l2_normalize(hv);
        tape.value(n).clone()
    };
    let partner: Vec<usize> = (0..2 * beta).map(|a| (a + beta) % (2 * beta)).collect();
    let mut mask = Tensor::filled(&[2 * beta, 2 * beta], 1.0);
    for a in 0..2 * beta {
        mask.data_mut()[a * 2 * beta + a] = 0.0;
        mask.data_mut()[a * 2 * beta + partner[a]] = 0.0;
    }
    let (mut ci, mut cj) = if cfg.random_start {
        (uniform_start(xi, cfg, 0), uniform_start(xj, cfg, 1))
    } else {
        (xi.clone(), xj.clone())
    };
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, Trainable::Nothing);
        let vi = tape.leaf(ci.clone());
        let vj = tape.leaf(cj.clone());
        let x = tape.concat_rows(vi, vj)?;
        let h = model.forward(&mut tape, &b, x, branch)?;
        let hn = tape.l2_normalize(h);
        let f = tape.constant(frozen.clone());
        let ft = tape.transpose(f)?;
        let sims = tape.matmul(hn, ft)?;
        let sims = tape.scale(sims, 1.0 / temperature);
        let sims = tape.add_scalar(sims, -1.0 / temperature);
        let e = tape.exp(sims)?;
        let m = tape.constant(mask.clone());
        let neg = tape.mul(e, m)?;
        let neg = tape.sum_last(neg)?;
        let pv = tape.select_rows(hn, &partner)?;
        let pos = tape.mul(hn, pv)?;
        let pos = tape.sum_last(pos)?;
        let pos = tape.scale(pos, 1.0 / temperature);
        let pos = tape.add_scalar(pos, -1.0 / temperature);
        let epos = tape.exp(pos)?;
        let den = tape.add(neg, epos)?;
        let lden = tape.log(den)?;
        let rows = tape.sub(lden, pos)?;
        let loss = tape.sum(rows);
        tape.backward(loss)?;
        let (gi, gj) = (tape.grad(vi), tape.grad(vj));
        ascend(&mut ci, &gi, xi, cfg, step)?;
        ascend(&mut cj, &gj, xj, cfg, step)?;
    }
    audit(xi, &ci, cfg.eps);
    audit(xj, &cj, cfg.eps);
    Ok((ci, cj))
}

fn rd_start(x0: &Tensor, cfg: &AttackConfig) -> Tensor {
    if cfg.random_start {
        return uniform_start(x0, cfg, 2);
    }
    let base = rng::derive_seed(cfg.seed, tags::ATTACK, 3);
    let mut x = x0.clone();
    for i in 0..x0.rows() {
        let mut r = rng::rng(rng::content_seed(base, x0.row(i)));
        for v in x.row_mut(i) {
            let z: f64 = StandardNormal.sample(&mut r);
            *v += RD_JITTER * z;
        }
    }
    project(x.data_mut(), x0.data(), cfg);
    x
}

/// Divergence attack: maximizes `d(h(x̃), h(x))` with the anchor `h(x)`
/// evaluated once. Each point starts from a tiny Gaussian offset whose
/// stream depends only on that point's values, so results are the same
/// whichever batch a point is attacked in.
pub fn pgd_rd(model: &Model, x: &Tensor, cfg: &AttackConfig, distance: &Distance, branch: Branch) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.is_identity() || x.rows() == 0 {
        audit(x, x, cfg.eps);
        return Ok(x.clone());
    }
    let anchor = model.h_values(x, branch)?;
    let mut cur = rd_start(x, cfg);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, Trainable::Nothing);
        let v = tape.leaf(cur.clone());
        let h = model.forward(&mut tape, &b, v, branch)?;
        let a = tape.constant(anchor.clone());
        let d = distance_var(&mut tape, h, a, distance)?;
        tape.backward(d)?;
        let g = tape.grad(v);
        ascend(&mut cur, &g, x, cfg, step)?;
    }
    audit(x, &cur, cfg.eps);
    Ok(cur)
}

fn ce_var(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits)?;
    let picked = tape.pick(lp, labels)?;
    let s = tape.sum(picked);
    Ok(tape.neg(s))
}

/// Supervised attack maximizing summed cross-entropy.
pub fn pgd_ce(model: &Model, x: &Tensor, labels: &[usize], cfg: &AttackConfig, branch: Branch) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.is_identity() || x.rows() == 0 {
        audit(x, x, cfg.eps);
        return Ok(x.clone());
    }
    let mut cur = if cfg.random_start {
        uniform_start(x, cfg, 4)
    } else {
        x.clone()
    };
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, Trainable::Nothing);
        let v = tape.leaf(cur.clone());
        let h = model.forward(&mut tape, &b, v, branch)?;
        let loss = ce_var(&mut tape, h, labels)?;
        tape.backward(loss)?;
        let g = tape.grad(v);
        ascend(&mut cur, &g, x, cfg, step)?;
    }
    audit(x, &cur, cfg.eps);
    Ok(cur)
}

/// One-step pair attack; the step may exceed `eps`, in which case the
/// projection binds.
pub fn fgsm_pair(
    model: &Model,
    xi: &Tensor,
    xj: &Tensor,
    eps: f64,
    step: f64,
    temperature: f64,
    branch: Branch,
) -> Result<(Tensor, Tensor)> {
    pgd_pair(model, xi, xj, &AttackConfig::new(1, step, eps), temperature, branch)
}

/// One-step supervised attack.
pub fn fgsm_ce(model: &Model, x: &Tensor, labels: &[usize], eps: f64, step: f64, branch: Branch) -> Result<Tensor> {
    pgd_ce(model, x, labels, &AttackConfig::new(1, step, eps), branch)
}
