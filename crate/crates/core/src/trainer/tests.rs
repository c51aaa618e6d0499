use super::*;
use crate::data::{gen_synthetic, SyntheticSpec};
use crate::model::EncoderConfig;

fn config(mode: Mode, method: SelectionMethod, epochs: usize, warmup: usize, interval: usize, k: f64) -> TrainConfig {
    TrainConfig {
        mode,
        method,
        schedule: TrainSchedule {
            epochs,
            warmup,
            interval,
            fraction: k,
            lr: 0.05,
            lr_schedule: LrSchedule::Cosine,
            momentum: 0.9,
            selection_lr: 0.01,
        },
        batch_size: 8,
        temperature: 0.5,
        omega: 0.0,
        strength: 0.5,
        dynacl_period: 2,
        dynacl_rate: 2.0 / 3.0,
        trades_c: 6.0,
        attack: AttackConfig::new(2, 0.02, 0.05),
        selection_steps: 1,
        distance: Distance::kl(),
        last_layer: false,
        chunk: None,
        norm_momentum: 0.1,
        seed: 11,
    }
}

fn data(n: usize, labeled: bool) -> (Dataset, Tensor) {
    let ds = gen_synthetic(&SyntheticSpec {
        n: n + 8,
        dim: 4,
        classes: 2,
        separation: 2.0,
        noise: 1.0,
        seed: 5,
    })
    .unwrap();
    let train: Vec<usize> = (0..n).collect();
    let val: Vec<usize> = (n..n + 8).collect();
    let t = ds.subset(&train);
    let t = if labeled { t } else { t.unlabeled() };
    (t, ds.features().select_rows(&val))
}

fn model(v: usize) -> Model {
    let mut c = EncoderConfig::new(4, vec![6], 4, v);
    c.seed = 2;
    Model::new(c).unwrap()
}

#[test]
fn reselection_predicate_matches_definition() {
    for (w, i) in [(0, 1), (2, 4), (3, 3), (5, 2), (10, 20)] {
        let s = config(Mode::Acl, SelectionMethod::Rcs, 30, w, i, 0.5).schedule;
        for e in 0..30 {
            assert_eq!(s.is_reselection_epoch(e), e >= w && e % i == 0, "w={w} i={i} e={e}");
        }
    }
}

#[test]
fn cosine_schedule_endpoints() {
    let s = config(Mode::Acl, SelectionMethod::Full, 4, 0, 1, 1.0).schedule;
    assert_eq!(s.lr_at(0), 0.05);
    assert!((s.lr_at(2) - 0.025).abs() < 1e-15);
    let mut c = s.clone();
    c.lr_schedule = LrSchedule::Constant;
    assert_eq!(c.lr_at(3), 0.05);
}

#[test]
fn worked_accounting_example() {
    // E=10, W=2, I=4, k=0.5, N=64, β=8: reselections at 4 and 8. Epochs 2
    // and 3 still train on the full set because no coreset exists yet.
    let c = config(Mode::Acl, SelectionMethod::Rcs, 10, 2, 4, 0.5);
    let m = predict_cost(64, &c).unwrap();
    assert_eq!(m.reselections, 2);
    assert_eq!(m.first_coreset_epoch, 4);
    assert_eq!(m.total, 4 * 8 + 6 * 4 + 2 * (8 + 4));
    // When W is a multiple of I the count reduces to W·B + (E−W)·b + R·(B+b).
    let c = config(Mode::Acl, SelectionMethod::Rcs, 10, 4, 4, 0.5);
    assert_eq!(predict_cost(64, &c).unwrap().total, 4 * 8 + 6 * 4 + 2 * (8 + 4));
    let full = config(Mode::Acl, SelectionMethod::Rcs, 10, 10, 4, 0.5);
    let m = predict_cost(64, &full).unwrap();
    assert_eq!((m.total, m.reselections), (80, 0));
}

#[test]
fn full_warmup_is_plain_training() {
    let (ds, u) = data(32, false);
    let a = pretrain(model(3), &ds, &u, &config(Mode::Acl, SelectionMethod::Rcs, 3, 3, 1, 0.5)).unwrap();
    let b = pretrain(model(3), &ds, &u, &config(Mode::Acl, SelectionMethod::Full, 3, 3, 1, 0.5)).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.records, b.records);
    assert!(a.coresets.is_empty());
}

#[test]
fn full_fraction_selects_every_batch() {
    let (ds, u) = data(32, false);
    let c = config(Mode::Acl, SelectionMethod::Rcs, 3, 1, 1, 1.0);
    let out = pretrain(model(3), &ds, &u, &c).unwrap();
    assert_eq!(out.coresets.len(), 2);
    for round in &out.coresets {
        let mut s = round.result.selected.clone();
        s.sort_unstable();
        assert_eq!(s, vec![0, 1, 2, 3]);
    }
    assert!(out.records.iter().all(|r| r.train_steps == 4));
    speedup_report(&out, 32, &c).unwrap();
}

#[test]
fn counters_match_prediction_and_runs_repeat() {
    let (ds, u) = data(40, false);
    for (method, mode) in [
        (SelectionMethod::Rcs, Mode::Acl),
        (SelectionMethod::Random, Mode::DynAcl),
        (SelectionMethod::Full, Mode::Acl),
    ] {
        let c = config(mode, method, 5, 1, 2, 0.4);
        let a = pretrain(model(3), &ds, &u, &c).unwrap();
        let r = speedup_report(&a, 40, &c).unwrap();
        assert_eq!(r.actual, r.predicted);
        let b = pretrain(model(3), &ds, &u, &c).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.model, b.model);
        assert!(a.records.iter().all(|r| r.loss_mean.is_finite() && r.rd_u >= 0.0));
    }
}

#[test]
fn chunked_selection_is_accounted() {
    let (ds, u) = data(64, false);
    let mut c = config(Mode::Acl, SelectionMethod::Rcs, 4, 2, 2, 0.5);
    c.chunk = Some(3);
    let out = pretrain(model(3), &ds, &u, &c).unwrap();
    // Chunks of 3, 3 and 2 batches keep 1, 1 and 1 of them.
    assert_eq!(out.coresets[0].result.selected.len(), 3);
    speedup_report(&out, 64, &c).unwrap();
}

#[test]
fn mismatched_counters_are_reported_per_epoch() {
    let (ds, u) = data(32, false);
    let c = config(Mode::Acl, SelectionMethod::Rcs, 3, 1, 1, 0.5);
    let mut out = pretrain(model(3), &ds, &u, &c).unwrap();
    out.records[2].train_steps += 1;
    let err = speedup_report(&out, 32, &c).unwrap_err().to_string();
    assert!(err.contains("epoch 2"), "{err}");
}

#[test]
fn coreset_epochs_train_on_the_coreset_only() {
    let (ds, u) = data(48, false);
    let c = config(Mode::Acl, SelectionMethod::Random, 4, 1, 1, 0.34);
    let out = pretrain(model(3), &ds, &u, &c).unwrap();
    assert_eq!(out.records[0].active_batches, 6);
    for r in &out.records[1..] {
        assert_eq!(r.active_batches, 2);
        assert_eq!(r.coreset_round, Some(r.epoch - 1));
    }
}

#[test]
fn trades_without_budget_matches_cross_entropy() {
    let (ds, u) = data(32, true);
    let mut trades = config(Mode::Trades, SelectionMethod::Rcs, 4, 1, 2, 0.5);
    trades.attack.eps = 0.0;
    let mut ce = trades.clone();
    ce.mode = Mode::Ce;
    let a = pretrain(model(2), &ds, &u, &trades).unwrap();
    let b = pretrain(model(2), &ds, &u, &ce).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.records, b.records);
    assert_eq!(
        a.coresets.iter().map(|r| &r.result.selected).collect::<Vec<_>>(),
        b.coresets.iter().map(|r| &r.result.selected).collect::<Vec<_>>()
    );
}

#[test]
fn supervised_modes_train() {
    let (ds, u) = data(32, true);
    let c = config(Mode::Sat, SelectionMethod::Rcs, 3, 1, 1, 0.5);
    let out = pretrain(model(2), &ds, &u, &c).unwrap();
    speedup_report(&out, 32, &c).unwrap();
    assert!(pretrain(model(3), &ds, &u, &c).is_err(), "head width must match the classes");
    assert!(pretrain_acl(model(2), ds.features(), &u, &c).is_err());
    let unlabeled = ds.unlabeled();
    assert!(pretrain_supervised(model(2), &unlabeled, &u, &c).is_err());
}

#[test]
fn selection_failure_names_the_epoch() {
    let (ds, _) = data(32, false);
    let bad_u = Tensor::zeros(&[3, 7]);
    let c = config(Mode::Acl, SelectionMethod::Rcs, 3, 0, 1, 0.5);
    match pretrain(model(3), &ds, &bad_u, &c) {
        Err(Error::Selection { epoch, .. }) => assert_eq!(epoch, 0),
        other => panic!("expected a selection error, got {other:?}"),
    }
}

#[test]
fn bad_schedules_are_rejected() {
    let (ds, u) = data(32, false);
    for c in [
        config(Mode::Acl, SelectionMethod::Rcs, 3, 4, 1, 0.5),
        config(Mode::Acl, SelectionMethod::Rcs, 3, 1, 0, 0.5),
        config(Mode::Acl, SelectionMethod::Rcs, 3, 1, 1, 0.0),
        config(Mode::Acl, SelectionMethod::Rcs, 3, 1, 1, 0.1),
    ] {
        assert!(pretrain(model(3), &ds, &u, &c).is_err());
    }
}

#[test]
fn epochs_csv_layout() {
    let rec = EpochRecord {
        epoch: 0,
        lr: 0.1,
        loss_mean: 1.5,
        rd_u: 0.25,
        train_steps: 4,
        selection_grad_evals: 0,
        reselected: false,
        coreset_round: None,
        active_batches: 4,
    };
    let mut buf = Vec::new();
    write_epochs_csv(&[rec], &mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "epoch,lr,loss_mean,rd_u,train_steps,selection_grad_evals,reselected,coreset_round,active_batches\n\
         0,0.1,1.5,0.25,4,0,0,,4\n"
    );
}
