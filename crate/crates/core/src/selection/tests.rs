use rand::Rng as _;

use super::*;
use crate::attack::AttackConfig;
use crate::autodiff::Tensor;
use crate::data::MinibatchPartition;
use crate::divergence::RdConfig;
use crate::model::{EncoderConfig, Model};

/// Fixed gradients: `q_U` is constant and each batch gradient is given.
struct Fixed {
    q_u: Vec<f64>,
    grads: Vec<Vec<f64>>,
    beta: usize,
}

impl SelectionObjective for Fixed {
    fn theta0(&self) -> Vec<f64> {
        vec![0.0; self.q_u.len()]
    }
    fn num_batches(&self) -> usize {
        self.grads.len()
    }
    fn batch_len(&self, _m: usize) -> usize {
        self.beta
    }
    fn batch_size(&self) -> usize {
        self.beta
    }
    fn batch_grad(&self, _t: &[f64], m: usize) -> Result<Vec<f64>> {
        Ok(self.grads[m].clone())
    }
    fn val_loss(&self, t: &[f64]) -> Result<f64> {
        Ok(dot(&self.q_u, t))
    }
    fn val_grad(&self, _t: &[f64]) -> Result<Vec<f64>> {
        Ok(self.q_u.clone())
    }
}

struct Instance {
    model: Model,
    x: Tensor,
    u: Tensor,
    partition: MinibatchPartition,
}

fn instance(seed: u64, n: usize, beta: usize) -> Instance {
    let mut c = EncoderConfig::new(4, vec![6], 4, 3);
    c.seed = seed;
    let model = Model::new(c).unwrap();
    let mut r = crate::rng::rng(seed + 100);
    let x = Tensor::matrix(n, 4, (0..n * 4).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let u = Tensor::matrix(6, 4, (0..24).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let partition = MinibatchPartition::new(n, beta, seed).unwrap();
    Instance { model, x, u, partition }
}

fn objective(inst: &Instance, last_layer: bool) -> ModelObjective<'_> {
    let attack = AttackConfig::new(2, 0.05, 0.1);
    ModelObjective::contrastive(
        &inst.model.snapshot(),
        &inst.x,
        &inst.partition,
        &inst.u,
        RdConfig::new(attack.clone()),
        BatchLoss::Contrastive {
            omega: 0.0,
            temperature: 0.5,
            strength: 0.5,
            attack,
        },
        last_layer,
        7,
    )
    .unwrap()
}

fn strip_time(mut r: CoresetResult) -> CoresetResult {
    r.wall_time = Duration::ZERO;
    r
}

#[test]
fn budget_matches_integer_arithmetic() {
    let mut r = crate::rng::rng(1);
    for _ in 0..2000 {
        let n: usize = r.random_range(1..5000);
        let beta: usize = r.random_range(1..600);
        let den: usize = r.random_range(1..64);
        let num: usize = r.random_range(1..=den);
        let k = num as f64 / den as f64;
        let exact = num * n / (den * beta);
        match selection_budget(n, beta, k) {
            Ok(b) => assert_eq!(b, exact, "n={n} beta={beta} k={num}/{den}"),
            Err(Error::FractionTooSmall { .. }) => assert_eq!(exact, 0),
            Err(e) => panic!("{e}"),
        }
    }
    assert!(selection_budget(10, 2, 0.0).is_err());
    assert!(selection_budget(10, 2, 1.5).is_err());
}

#[test]
fn taylor_gain_cases() {
    assert_eq!(taylor_gain(&[1.0, 0.0], &[0.0, 3.0], 0.1).unwrap(), 0.0);
    let q = [1.0, -2.0, 0.5];
    assert!((taylor_gain(&q, &q, 0.01).unwrap() - 0.01 * 5.25).abs() < 1e-15);
    assert!(taylor_gain(&q, &[1.0], 0.1).is_err());
}

#[test]
fn aligned_batch_is_chosen_first() {
    let grads = vec![
        vec![0.0, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0, 0.0],
        vec![1.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0],
    ];
    let obj = Fixed {
        q_u: vec![2.0, 0.0, 0.0, 0.0],
        grads,
        beta: 4,
    };
    let r = rcs_greedy(&obj, 0.5, 0.1).unwrap();
    assert_eq!(r.selected[0], 2);
    assert!((r.gains[0] - 0.2).abs() < 1e-15);
    // Ties among the orthogonal batches go to the lowest id.
    assert_eq!(r.selected[1], 0);
}

#[test]
fn full_fraction_selects_everything_and_counts_evals() {
    let inst = instance(1, 40, 8);
    let obj = objective(&inst, true);
    let r = rcs_greedy(&obj, 1.0, 0.05).unwrap();
    let mut ids = r.selected.clone();
    ids.sort_unstable();
    assert_eq!(ids, (0..5).collect::<Vec<_>>());
    assert_eq!(r.grad_evals, 5 + 5);
    let r = rcs_greedy(&obj, 0.4, 0.05).unwrap();
    assert_eq!(r.selected.len(), 2);
    assert_eq!(r.grad_evals, 5 + 2);
    assert_eq!(r.cumulative_evals, vec![6, 7]);
    assert!(matches!(rcs_greedy(&obj, 0.1, 0.05), Err(Error::FractionTooSmall { .. })));
}

#[test]
fn greedy_choices_replay() {
    let inst = instance(2, 48, 8);
    for last_layer in [true, false] {
        let obj = objective(&inst, last_layer);
        let eta = 0.05;
        let r = rcs_greedy(&obj, 0.5, eta).unwrap();
        let ev = GainEvaluator::new(&obj, eta).unwrap();
        for i in 0..r.selected.len() {
            let theta = ev.theta_for(&r.selected[..i]);
            let q_u = obj.val_grad(&theta).unwrap();
            let mut best = None::<(usize, f64)>;
            for m in (0..6).filter(|m| !r.selected[..i].contains(m)) {
                let g = taylor_gain(&q_u, &ev.batch_grads()[m], eta).unwrap();
                if best.is_none_or(|(_, b)| g > b) {
                    best = Some((m, g));
                }
            }
            assert_eq!(best.unwrap().0, r.selected[i]);
        }
        assert_eq!(strip_time(r), strip_time(rcs_greedy(&obj, 0.5, eta).unwrap()));
    }
}

#[test]
fn chunked_variants() {
    let inst = instance(3, 64, 8);
    let obj = objective(&inst, true);
    let whole = rcs_greedy(&obj, 0.25, 0.05).unwrap();
    for c in [8, 20] {
        assert_eq!(strip_time(chunked_select(&obj, 0.25, 0.05, c).unwrap()), strip_time(whole.clone()));
    }
    let chunked = chunked_select(&obj, 0.25, 0.05, 4).unwrap();
    let budgets = chunk_budgets(&obj, 0.25, 4).unwrap();
    assert_eq!(budgets, vec![1, 1]);
    assert_eq!(chunked.selected.len(), budgets.iter().sum::<usize>());
    assert_eq!(chunked.grad_evals, 8 + 2);
    assert!(chunked.selected[0] < 4 && chunked.selected[1] >= 4);
    assert!(matches!(chunked_select(&obj, 0.25, 0.05, 2), Err(Error::FractionTooSmall { .. })));
}

#[test]
fn identical_chunks_pick_identically() {
    let grads: Vec<Vec<f64>> = (0..3).map(|m| vec![m as f64, 1.0 - m as f64 * 0.3]).collect();
    let obj = Fixed {
        q_u: vec![0.4, 1.0],
        grads: grads.iter().chain(&grads).cloned().collect(),
        beta: 2,
    };
    let r = chunked_select(&obj, 2.0 / 3.0, 0.1, 3).unwrap();
    assert_eq!(r.selected.len(), 4);
    assert_eq!(r.selected[2] - 3, r.selected[0]);
    assert_eq!(r.selected[3] - 3, r.selected[1]);
}

#[test]
fn random_selection() {
    let all = random_select(8, 64, 8, 1.0, 3, 0).unwrap();
    let mut ids = all.selected.clone();
    ids.sort_unstable();
    assert_eq!(ids, (0..8).collect::<Vec<_>>());
    assert_eq!(all.grad_evals, 0);
    let a = random_select(8, 64, 8, 0.25, 3, 0).unwrap();
    let b = random_select(8, 64, 8, 0.25, 3, 0).unwrap();
    assert_eq!(a.selected, b.selected);
    let mut freq = [0usize; 8];
    for seed in 0..1000 {
        let r = random_select(8, 64, 8, 0.25, seed, 0).unwrap();
        assert_eq!(r.selected.len(), 2);
        for m in r.selected {
            freq[m] += 1;
        }
    }
    for f in freq {
        let p = f as f64 / 1000.0;
        assert!((p - 0.25).abs() <= 0.05, "{freq:?}");
    }
}

#[test]
fn exact_gain_identities() {
    let inst = instance(4, 32, 8);
    let obj = objective(&inst, true);
    let ev = GainEvaluator::new(&obj, 0.05).unwrap();
    assert_eq!(ev.exact_gain(&[0, 1], &[]).unwrap(), 0.0);
    assert!(matches!(ev.exact_gain(&[0, 1], &[1]), Err(Error::OverlappingSets(1))));
    let still = GainEvaluator::new(&obj, 0.0).unwrap();
    assert_eq!(still.exact_gain(&[0], &[2, 3]).unwrap(), 0.0);
    let s = [0];
    let lhs = ev.exact_gain(&s, &[2]).unwrap() + ev.exact_gain(&[0, 2], &[3]).unwrap();
    let rhs = ev.g(&[0, 2, 3]).unwrap() - ev.g(&s).unwrap();
    assert!((lhs - rhs).abs() <= 1e-9);
}

#[test]
fn oracle_cases() {
    let inst = instance(5, 16, 8);
    let obj = objective(&inst, true);
    let ev = GainEvaluator::new(&obj, 0.05).unwrap();
    let best = exhaustive_oracle(&ev, 1, ORACLE_CAP).unwrap();
    let (g0, g1) = (ev.g(&[0]).unwrap(), ev.g(&[1]).unwrap());
    assert_eq!(best.best, vec![if g1 > g0 { 1 } else { 0 }]);
    assert_eq!(best.evaluations, 2);
    let full = exhaustive_oracle(&ev, 2, ORACLE_CAP).unwrap();
    assert_eq!((full.best.clone(), full.evaluations), (vec![0, 1], 1));

    let inst = instance(6, 64, 8);
    let obj = objective(&inst, true);
    let ev = GainEvaluator::new(&obj, 0.05).unwrap();
    let r = exhaustive_oracle(&ev, 2, ORACLE_CAP).unwrap();
    assert_eq!(r.evaluations, 28);
    assert!(matches!(exhaustive_oracle(&ev, 2, 27), Err(Error::OracleCapExceeded { combinations: 28, cap: 27 })));
}

#[test]
fn guarantee_on_small_instance() {
    let inst = instance(7, 64, 8);
    let obj = objective(&inst, true);
    let ev = GainEvaluator::new(&obj, 0.05).unwrap();
    let greedy = rcs_greedy(&obj, 0.25, 0.05).unwrap();
    let oracle = exhaustive_oracle(&ev, 2, ORACLE_CAP).unwrap();
    let params = GuaranteeParams::empirical(&ev, 2).unwrap();
    assert!(params.sigma >= 1.0 && params.gamma_star > 0.0 && params.gamma_star <= 1.0);
    let rep = verify_guarantee(&ev, &greedy, &oracle, &params).unwrap();
    assert!(rep.g_star >= rep.g_greedy);
    assert!(rep.passed(), "{rep:?}");
    // Optimal "greedy" trivially satisfies the bound.
    let mut opt = greedy.clone();
    opt.selected = oracle.best.clone();
    let rep = verify_guarantee(&ev, &opt, &oracle, &params).unwrap();
    assert_eq!(rep.lhs, rep.g_star);
    let mut other = greedy;
    other.partition_fingerprint ^= 1;
    assert!(matches!(verify_guarantee(&ev, &other, &oracle, &params), Err(Error::PartitionMismatch)));
}

#[test]
fn csv_layout() {
    let r = CoresetResult {
        selected: vec![3, 1],
        gains: vec![0.5, f64::NAN],
        cumulative_evals: vec![9, 10],
        grad_evals: 10,
        wall_time: Duration::ZERO,
        theta_drift: 0.0,
        num_batches: 8,
        partition_fingerprint: 0,
    };
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "iteration,batch_id,gain,cumulative_grad_evals\n0,3,0.5,9\n1,1,,10\n"
    );
}
