//! Contrastive and supervised training objectives.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::attack::{pgd_ce, pgd_pair, pgd_rd, AttackConfig};
use crate::autodiff::{Tape, Tensor, Var};
use crate::divergence::{distance_var, Distance};
use crate::error::{Error, Result};
use crate::model::{Bound, Branch, Model};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Average over pairs (contrastive) or points (supervised).
    Mean,
    Sum,
}

impl Reduction {
    fn apply(self, tape: &mut Tape, total: Var, count: usize) -> Var {
        match self {
            Reduction::Sum => total,
            Reduction::Mean => tape.scale(total, 1.0 / count as f64),
        }
    }
}

/// One random view of every row: per-coordinate dropout with probability
/// `0.1s`, a per-point gain in `[1 − 0.2s, 1 + 0.2s]`, then Gaussian noise
/// with std `0.1s`. Strength 0 is the identity.
pub fn augment(x: &Tensor, strength: f64, r: &mut rng::Rng) -> Tensor {
    if strength <= 0.0 {
        return x.clone();
    }
    let p = 0.1 * strength;
    let noise = Normal::new(0.0, 0.1 * strength).expect("positive std");
    let mut out = x.clone();
    for i in 0..x.rows() {
        let gain = r.random_range(1.0 - 0.2 * strength..=1.0 + 0.2 * strength);
        for v in out.row_mut(i) {
            let keep = if r.random::<f64>() < p { 0.0 } else { 1.0 };
            *v = gain * keep * *v + noise.sample(r);
        }
    }
    out
}

/// Two augmented views of a minibatch of `β` points. Row `k` of either view
/// comes from point `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBatch {
    pub views_i: Tensor,
    pub views_j: Tensor,
    pub strength: f64,
}

impl AugmentedBatch {
    pub fn new(x: &Tensor, strength: f64, seed: u64) -> Self {
        let mut r = rng::rng(seed);
        let views_i = augment(x, strength, &mut r);
        let views_j = augment(x, strength, &mut r);
        Self {
            views_i,
            views_j,
            strength,
        }
    }

    pub fn from_views(views_i: Tensor, views_j: Tensor) -> Self {
        Self {
            views_i,
            views_j,
            strength: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        if self.views_i.numel() == 0 {
            0
        } else {
            self.views_i.rows()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Source point of row `u` in the stacked `2β` view matrix.
    pub fn source_of(&self, u: usize) -> usize {
        u % self.len()
    }
}

/// NT-Xent on projected views `hi`, `hj` (`[β, v]` each).
///
/// For every anchor among the `2β` views the denominator runs over all other
/// views, the positive included; each pair contributes both directions.
pub fn cl_loss_var(tape: &mut Tape, hi: Var, hj: Var, temperature: f64, red: Reduction) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let beta = tape.shape(hi).first().copied().unwrap_or(0);
    if beta == 0 || tape.value(hi).numel() == 0 {
        return Err(Error::EmptyBatch);
    }
    let n = 2 * beta;
    let v = tape.concat_rows(hi, hj)?;
    let s = tape.cosine_similarity(v, v)?;
    // Shift by the maximum possible similarity so exp never overflows.
    let s = tape.scale(s, 1.0 / temperature);
    let s = tape.add_scalar(s, -1.0 / temperature);
    let e = tape.exp(s)?;
    let mut mask = Tensor::filled(&[n, n], 1.0);
    for a in 0..n {
        mask.data_mut()[a * n + a] = 0.0;
    }
    let m = tape.constant(mask);
    let e = tape.mul(e, m)?;
    let den = tape.sum_last(e)?;
    let lden = tape.log(den)?;
    let partner: Vec<usize> = (0..n).map(|a| (a + beta) % n).collect();
    let pos = tape.pick(s, &partner)?;
    let rows = tape.sub(lden, pos)?;
    let total = tape.sum(rows);
    Ok(red.apply(tape, total, beta))
}

/// Contrastive loss of two input views through `h`.
pub fn cl_loss(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    xi: &Tensor,
    xj: &Tensor,
    branch: Branch,
    temperature: f64,
    red: Reduction,
) -> Result<Var> {
    let a = tape.constant(xi.clone());
    let b = tape.constant(xj.clone());
    let hi = model.forward(tape, bound, a, branch)?;
    let hj = model.forward(tape, bound, b, branch)?;
    cl_loss_var(tape, hi, hj, temperature, red)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AclParams {
    pub omega: f64,
    pub attack: AttackConfig,
    pub temperature: f64,
    pub reduction: Reduction,
}

/// `(1 + ω)·CL(adversarial views) + (1 − ω)·CL(natural views)`.
///
/// Adversarial views come from [`pgd_pair`] against the current parameter
/// values without touching the tape, so no gradient flows through their
/// construction.
pub fn acl_loss(tape: &mut Tape, model: &Model, bound: &Bound, batch: &AugmentedBatch, p: &AclParams) -> Result<Var> {
    if !(0.0..=1.0).contains(&p.omega) {
        return Err(Error::Config(format!("omega must lie in [0, 1], got {}", p.omega)));
    }
    p.attack.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (ai, aj) = pgd_pair(model, &batch.views_i, &batch.views_j, &p.attack, p.temperature, Branch::Adversarial)?;
    let adv = cl_loss(tape, model, bound, &ai, &aj, Branch::Adversarial, p.temperature, p.reduction)?;
    let nat = cl_loss(tape, model, bound, &batch.views_i, &batch.views_j, Branch::Natural, p.temperature, p.reduction)?;
    let adv = tape.scale(adv, 1.0 + p.omega);
    let nat = tape.scale(nat, 1.0 - p.omega);
    Ok(tape.add(adv, nat)?)
}

/// Augmentation strength `μ_e` and weight `ω_e` at one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynaclState {
    pub epoch: usize,
    pub total: usize,
    pub decay_period: usize,
    pub rate: f64,
    pub mu: f64,
    pub omega: f64,
}

/// `μ_e = 1 − ⌊e/K⌋·K/E`, `ω_e = ν·(1 − μ_e)`.
pub fn dynacl_schedule(epoch: usize, total: usize, decay_period: usize, rate: f64) -> Result<DynaclState> {
    if decay_period == 0 {
        return Err(Error::Config("decay period must be at least 1".into()));
    }
    if epoch >= total {
        return Err(Error::EpochOutOfRange { epoch, total });
    }
    let mu = 1.0 - ((epoch / decay_period) * decay_period) as f64 / total as f64;
    Ok(DynaclState {
        epoch,
        total,
        decay_period,
        rate,
        mu,
        omega: rate * (1.0 - mu),
    })
}

fn check_labels(model: &Model, x: &Tensor, labels: &[usize]) -> Result<()> {
    let classes = model.config().projection_dim;
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    let rows = if x.numel() == 0 { 0 } else { x.rows() };
    if rows != labels.len() {
        return Err(Error::Config("label count differs from batch size".into()));
    }
    if rows == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

fn ce_on(tape: &mut Tape, model: &Model, bound: &Bound, x: &Tensor, labels: &[usize], branch: Branch) -> Result<Var> {
    let xv = tape.constant(x.clone());
    let logits = model.forward(tape, bound, xv, branch)?;
    let lp = tape.log_softmax(logits)?;
    let picked = tape.pick(lp, labels)?;
    let s = tape.sum(picked);
    Ok(tape.neg(s))
}

/// Cross-entropy of the head's logits on natural inputs.
pub fn ce_loss(tape: &mut Tape, model: &Model, bound: &Bound, x: &Tensor, labels: &[usize], red: Reduction) -> Result<Var> {
    check_labels(model, x, labels)?;
    let total = ce_on(tape, model, bound, x, labels, Branch::Natural)?;
    Ok(red.apply(tape, total, labels.len()))
}

/// Cross-entropy on inputs perturbed to maximize cross-entropy.
pub fn sat_loss(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    x: &Tensor,
    labels: &[usize],
    attack: &AttackConfig,
    red: Reduction,
) -> Result<Var> {
    check_labels(model, x, labels)?;
    let adv = pgd_ce(model, x, labels, attack, Branch::Adversarial)?;
    let total = ce_on(tape, model, bound, &adv, labels, Branch::Adversarial)?;
    Ok(red.apply(tape, total, labels.len()))
}

/// `CE(x) + c·KL(h(x̃) ‖ h(x))` with `x̃` maximizing the divergence. When
/// the attack is the identity or `c = 0` the divergence term is identically
/// zero and is left off the tape, so the result is bit-identical to
/// [`ce_loss`].
#[allow(clippy::too_many_arguments)]
pub fn trades_loss(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    x: &Tensor,
    labels: &[usize],
    c: f64,
    attack: &AttackConfig,
    red: Reduction,
) -> Result<Var> {
    if !(c >= 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("trade-off c must be non-negative, got {c}")));
    }
    attack.validate()?;
    if attack.is_identity() || c == 0.0 {
        return ce_loss(tape, model, bound, x, labels, red);
    }
    check_labels(model, x, labels)?;
    let kl = Distance::kl();
    let adv = pgd_rd(model, x, attack, &kl, Branch::Adversarial)?;
    let ce = ce_on(tape, model, bound, x, labels, Branch::Natural)?;
    let xa = tape.constant(adv);
    let xn = tape.constant(x.clone());
    let ha = model.forward(tape, bound, xa, Branch::Adversarial)?;
    let hn = model.forward(tape, bound, xn, Branch::Adversarial)?;
    let d = distance_var(tape, ha, hn, &kl)?;
    let d = tape.scale(d, c);
    let total = tape.add(ce, d)?;
    Ok(red.apply(tape, total, labels.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::kl_div;
    use crate::model::{EncoderConfig, Trainable};
    use proptest::prelude::*;

    fn model(seed: u64, v: usize) -> Model {
        let mut c = EncoderConfig::new(3, vec![5], 4, v);
        c.seed = seed;
        Model::new(c).unwrap()
    }

    fn pts(n: usize, d: usize, seed: u64) -> Tensor {
        let mut r = rng::rng(seed);
        Tensor::matrix(n, d, (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn cl_value(hi: &Tensor, hj: &Tensor, t: f64, red: Reduction) -> f64 {
        let mut tape = Tape::new();
        let a = tape.constant(hi.clone());
        let b = tape.constant(hj.clone());
        let l = cl_loss_var(&mut tape, a, b, t, red).unwrap();
        tape.value(l).item().unwrap()
    }

    /// Direct evaluation of the pair formula with explicit loops.
    fn cl_formula(hi: &Tensor, hj: &Tensor, t: f64) -> f64 {
        let beta = hi.rows();
        let all: Vec<Vec<f64>> = (0..beta).map(|k| hi.row(k).to_vec()).chain((0..beta).map(|k| hj.row(k).to_vec())).collect();
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb)
        };
        let mut total = 0.0;
        for k in 0..beta {
            for (anchor, pos) in [(k, k + beta), (k + beta, k)] {
                let num = (cos(&all[anchor], &all[pos]) / t).exp();
                let den: f64 = (0..2 * beta).filter(|&b| b != anchor).map(|b| (cos(&all[anchor], &all[b]) / t).exp()).sum();
                total += -(num / den).ln();
            }
        }
        total / beta as f64
    }

    #[test]
    fn single_pair_is_zero() {
        let h = pts(1, 3, 1);
        assert!(cl_value(&h, &pts(1, 3, 2), 0.5, Reduction::Mean).abs() < 1e-12);
    }

    #[test]
    fn identical_embeddings() {
        for beta in [2usize, 5] {
            let h = Tensor::from_rows(&vec![vec![0.3, -0.2, 0.9]; beta]).unwrap();
            let expect = 2.0 * ((2 * beta - 1) as f64).ln();
            assert!((cl_value(&h, &h, 0.2, Reduction::Mean) - expect).abs() < 1e-10);
            assert!((cl_value(&h, &h, 0.2, Reduction::Sum) - beta as f64 * expect).abs() < 1e-9);
        }
    }

    #[test]
    fn hand_chosen_embeddings() {
        let hi = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let hj = Tensor::from_rows(&[vec![2.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!((cl_value(&hi, &hj, 0.5, Reduction::Mean) - cl_formula(&hi, &hj, 0.5)).abs() < 1e-10);
    }

    #[test]
    fn empty_batch_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[0, 3]));
        assert!(matches!(cl_loss_var(&mut tape, a, a, 0.5, Reduction::Mean), Err(Error::EmptyBatch)));
    }

    proptest! {
        #[test]
        fn pair_permutation_invariance(seed in 0u64..5000, shift in 1usize..4) {
            let (hi, hj) = (pts(4, 3, seed), pts(4, 3, seed + 1));
            let perm: Vec<usize> = (0..4).map(|k| (k + shift) % 4).collect();
            let a = cl_value(&hi, &hj, 0.3, Reduction::Mean);
            let b = cl_value(&hi.select_rows(&perm), &hj.select_rows(&perm), 0.3, Reduction::Mean);
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn rotation_invariance(seed in 0u64..5000, angle in 0.0f64..std::f64::consts::TAU) {
            let (hi, hj) = (pts(3, 2, seed), pts(3, 2, seed + 7));
            let (c, s) = (angle.cos(), angle.sin());
            let rot = |t: &Tensor| {
                let rows: Vec<Vec<f64>> = (0..t.rows()).map(|k| {
                    let r = t.row(k);
                    vec![c * r[0] - s * r[1], s * r[0] + c * r[1]]
                }).collect();
                Tensor::from_rows(&rows).unwrap()
            };
            let a = cl_value(&hi, &hj, 0.3, Reduction::Mean);
            let b = cl_value(&rot(&hi), &rot(&hj), 0.3, Reduction::Mean);
            prop_assert!((a - b).abs() < 1e-8);
        }
    }

    fn acl_value(m: &Model, batch: &AugmentedBatch, omega: f64, attack: AttackConfig) -> f64 {
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, Trainable::Nothing);
        let p = AclParams {
            omega,
            attack,
            temperature: 0.5,
            reduction: Reduction::Mean,
        };
        let l = acl_loss(&mut tape, m, &b, batch, &p).unwrap();
        tape.value(l).item().unwrap()
    }

    fn cl_of(m: &Model, xi: &Tensor, xj: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, Trainable::Nothing);
        let l = cl_loss(&mut tape, m, &b, xi, xj, Branch::Natural, 0.5, Reduction::Mean).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn acl_special_cases() {
        let m = model(1, 3);
        let batch = AugmentedBatch::new(&pts(4, 3, 2), 1.0, 9);
        let nat = cl_of(&m, &batch.views_i, &batch.views_j);
        for omega in [0.0, 0.4, 1.0] {
            let v = acl_value(&m, &batch, omega, AttackConfig::new(3, 0.05, 0.0));
            assert!((v - 2.0 * nat).abs() < 1e-12);
        }
        let attack = AttackConfig::new(3, 0.05, 0.1);
        let (ai, aj) = pgd_pair(&m, &batch.views_i, &batch.views_j, &attack, 0.5, Branch::Adversarial).unwrap();
        let adv = cl_of(&m, &ai, &aj);
        assert!((acl_value(&m, &batch, 1.0, attack.clone()) - 2.0 * adv).abs() < 1e-12);
        assert!((acl_value(&m, &batch, 0.0, attack) - (adv + nat)).abs() < 1e-10);
    }

    #[test]
    fn dynacl_values() {
        let s = dynacl_schedule(0, 1000, 50, 2.0 / 3.0).unwrap();
        assert_eq!((s.mu, s.omega), (1.0, 0.0));
        assert_eq!(dynacl_schedule(49, 1000, 50, 2.0 / 3.0).unwrap().mu, 1.0);
        assert!((dynacl_schedule(50, 1000, 50, 2.0 / 3.0).unwrap().mu - 0.95).abs() < 1e-12);
        let last = dynacl_schedule(999, 1000, 50, 2.0 / 3.0).unwrap();
        assert!((last.mu - 0.05).abs() < 1e-12);
        assert!((last.omega - 0.95 * 2.0 / 3.0).abs() < 1e-12);
        assert!(matches!(dynacl_schedule(1000, 1000, 50, 0.5), Err(Error::EpochOutOfRange { .. })));
    }

    #[test]
    fn dynacl_monotone() {
        let mut prev = dynacl_schedule(0, 300, 7, 0.6).unwrap();
        for e in 1..300 {
            let s = dynacl_schedule(e, 300, 7, 0.6).unwrap();
            assert!(s.mu <= prev.mu && s.omega >= prev.omega && s.omega <= 0.6);
            assert!((0.0..=1.0).contains(&s.mu));
            prev = s;
        }
    }

    fn sup_value(f: impl FnOnce(&mut Tape, &Model, &Bound) -> Result<Var>, m: &Model) -> f64 {
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, Trainable::Nothing);
        let l = f(&mut tape, m, &b).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn uniform_logits_cross_entropy() {
        let mut m = model(2, 4);
        m.set_flat_params(&vec![0.0; m.param_count()]).unwrap();
        let x = pts(5, 3, 3);
        let labels = [0, 1, 2, 3, 1];
        let v = sup_value(|t, m, b| ce_loss(t, m, b, &x, &labels, Reduction::Mean), &m);
        assert!((v - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn supervised_identities() {
        let m = model(3, 3);
        let x = pts(6, 3, 4);
        let y = [0, 1, 2, 2, 1, 0];
        let ce = sup_value(|t, m, b| ce_loss(t, m, b, &x, &y, Reduction::Mean), &m);
        let zero = AttackConfig::new(3, 0.05, 0.0);
        let sat0 = sup_value(|t, m, b| sat_loss(t, m, b, &x, &y, &zero, Reduction::Mean), &m);
        assert_eq!(sat0, ce);
        let tr0 = sup_value(|t, m, b| trades_loss(t, m, b, &x, &y, 6.0, &zero, Reduction::Mean), &m);
        assert_eq!(tr0, ce);
        let attack = AttackConfig::new(3, 0.05, 0.1);
        let trc0 = sup_value(|t, m, b| trades_loss(t, m, b, &x, &y, 0.0, &attack, Reduction::Mean), &m);
        assert_eq!(trc0, ce);
        let tr = sup_value(|t, m, b| trades_loss(t, m, b, &x, &y, 6.0, &attack, Reduction::Mean), &m);
        assert!(tr >= ce - 1e-12);
        let sat = sup_value(|t, m, b| sat_loss(t, m, b, &x, &y, &attack, Reduction::Mean), &m);
        assert!(sat >= ce - 1e-12);
        let bad = [0, 1, 2, 3, 1, 0];
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, Trainable::Nothing);
        assert!(matches!(
            ce_loss(&mut tape, &m, &b, &x, &bad, Reduction::Mean),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn trades_matches_components() {
        let m = model(5, 3);
        let x = pts(4, 3, 6);
        let y = [2, 0, 1, 1];
        let attack = AttackConfig::new(1, 0.05, 0.1);
        let adv = pgd_rd(&m, &x, &attack, &Distance::kl(), Branch::Adversarial).unwrap();
        let kl = kl_div(
            &m.h_values(&adv, Branch::Adversarial).unwrap(),
            &m.h_values(&x, Branch::Adversarial).unwrap(),
            1.0,
        )
        .unwrap();
        let ce = sup_value(|t, m, b| ce_loss(t, m, b, &x, &y, Reduction::Sum), &m);
        let tr = sup_value(|t, m, b| trades_loss(t, m, b, &x, &y, 6.0, &attack, Reduction::Sum), &m);
        assert!((tr - (ce + 6.0 * kl)).abs() < 1e-10);
    }

    #[test]
    fn sat_one_step_analytic() {
        // h(x) = [w x, 1] for w x > 0; label 1. dCE/dx = p0·w > 0 for w > 0.
        let mut m = Model::new(EncoderConfig::new(1, vec![1], 1, 2)).unwrap();
        let mut flat = vec![0.0; m.param_count()];
        let w = 0.8;
        flat[0] = w;
        flat[2] = 1.0;
        flat[4] = 1.0;
        flat[7] = 1.0;
        m.set_flat_params(&flat).unwrap();
        let x0 = 0.6;
        let (rho, eps) = (0.05, 0.1);
        let x = Tensor::matrix(1, 1, vec![x0]).unwrap();
        let attack = AttackConfig::new(1, rho, eps);
        let got = sup_value(|t, m, b| sat_loss(t, m, b, &x, &[1], &attack, Reduction::Mean), &m);
        let xa = x0 + rho;
        let z0 = w * xa;
        let expect = -(1.0 / (1.0 + (z0 - 1.0).exp())).ln();
        assert!((got - expect).abs() < 1e-10);
    }

    #[test]
    fn augment_identity_and_determinism() {
        let x = pts(4, 3, 1);
        assert_eq!(augment(&x, 0.0, &mut rng::rng(1)), x);
        assert_eq!(AugmentedBatch::new(&x, 1.0, 5), AugmentedBatch::new(&x, 1.0, 5));
        let b = AugmentedBatch::new(&x, 1.0, 5);
        assert_ne!(b.views_i, b.views_j);
        assert_eq!((b.len(), b.source_of(6)), (4, 2));
    }

    #[test]
    fn gradients_flow_into_parameters() {
        let m = model(7, 3);
        let batch = AugmentedBatch::new(&pts(3, 3, 8), 0.5, 1);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, Trainable::All);
        let p = AclParams {
            omega: 0.3,
            attack: AttackConfig::new(2, 0.05, 0.1),
            temperature: 0.5,
            reduction: Reduction::Mean,
        };
        let l = acl_loss(&mut tape, &m, &b, &batch, &p).unwrap();
        tape.backward(l).unwrap();
        let g = m.collect_grad(&tape, &b);
        assert!(g.iter().any(|v| *v != 0.0));
    }
}
