//! Pretraining loops with warmup, periodic coreset reselection, and exact
//! gradient-evaluation accounting.
//!
//! Epochs before the first reselection train on every minibatch. From then
//! on each epoch trains only on the batches of the current coreset. A
//! reselection fires at every epoch `e` with `e ≥ W` and `e % I == 0`; it
//! runs on a frozen snapshot, so the live model is never touched by it.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;

use crate::attack::AttackConfig;
use crate::autodiff::{Tape, Tensor};
use crate::data::{Dataset, MinibatchPartition};
use crate::divergence::{rd_set, Distance, RdConfig};
use crate::error::{Error, Result};
use crate::losses::{acl_loss, ce_loss, dynacl_schedule, sat_loss, trades_loss, AclParams, AugmentedBatch, Reduction};
use crate::model::{Branch, Model, NormMode, Trainable};
use crate::rng::{self, tags};
use crate::selection::{
    chunk_budgets, chunked_select, random_select, rcs_greedy, selection_budget, BatchLoss, CoresetResult,
    ModelObjective,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Acl,
    DynAcl,
    Sat,
    Trades,
    Ce,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "acl" => Self::Acl,
            "dynacl" => Self::DynAcl,
            "sat" => Self::Sat,
            "trades" => Self::Trades,
            "ce" => Self::Ce,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Acl => "acl",
            Self::DynAcl => "dynacl",
            Self::Sat => "sat",
            Self::Trades => "trades",
            Self::Ce => "ce",
        }
    }

    pub fn is_supervised(self) -> bool {
        matches!(self, Self::Sat | Self::Trades | Self::Ce)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMethod {
    Rcs,
    Random,
    /// No selection: every epoch trains on the full set.
    Full,
}

impl SelectionMethod {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "rcs" => Self::Rcs,
            "random" => Self::Random,
            "full" => Self::Full,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rcs => "rcs",
            Self::Random => "random",
            Self::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// `η′·½(1 + cos(π·e/E))`, stepped once per epoch.
    Cosine,
}

impl LrSchedule {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(Self::Constant),
            "cosine" => Some(Self::Cosine),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub warmup: usize,
    pub interval: usize,
    /// Subset fraction `k`.
    pub fraction: f64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    /// Virtual step size `η` used inside selection.
    pub selection_lr: f64,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.warmup > self.epochs {
            return Err(Error::Config(format!(
                "warmup {} exceeds total epochs {}",
                self.warmup, self.epochs
            )));
        }
        if self.interval == 0 {
            return Err(Error::Config("reselection interval must be at least 1".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("subset fraction must lie in (0, 1], got {}", self.fraction)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.selection_lr > 0.0 && self.selection_lr.is_finite()) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }

    pub fn is_reselection_epoch(&self, epoch: usize) -> bool {
        epoch >= self.warmup && epoch % self.interval == 0
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub method: SelectionMethod,
    pub schedule: TrainSchedule,
    pub batch_size: usize,
    /// Contrastive temperature `t`.
    pub temperature: f64,
    /// ACL weight `ω` (DynACL overrides it per epoch).
    pub omega: f64,
    /// Base augmentation strength (DynACL scales it by `μ_e`).
    pub strength: f64,
    /// DynACL decay period `K` and rate `ν`.
    pub dynacl_period: usize,
    pub dynacl_rate: f64,
    /// TRADES trade-off `c`.
    pub trades_c: f64,
    /// Training attack.
    pub attack: AttackConfig,
    /// Attack steps used during selection and for the logged RD.
    pub selection_steps: usize,
    pub distance: Distance,
    pub last_layer: bool,
    /// Batches per selection chunk; `None` selects over all batches at once.
    pub chunk: Option<usize>,
    pub norm_momentum: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.attack.validate()?;
        self.distance.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.omega) || !(0.0..=1.0).contains(&self.dynacl_rate) {
            return Err(Error::Config("omega and the DynACL rate must lie in [0, 1]".into()));
        }
        if !(self.strength >= 0.0) {
            return Err(Error::Config("augmentation strength must be non-negative".into()));
        }
        if self.dynacl_period == 0 {
            return Err(Error::Config("DynACL decay period must be at least 1".into()));
        }
        if !(self.trades_c >= 0.0) {
            return Err(Error::Config("TRADES c must be non-negative".into()));
        }
        if self.selection_steps == 0 {
            return Err(Error::Config("selection attack steps must be at least 1".into()));
        }
        if self.chunk == Some(0) {
            return Err(Error::Config("selection chunk must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) {
            return Err(Error::Config("normalization momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Attack used inside selection and for the logged RD: `T_RCS` steps with
    /// the step size rescaled to keep the total travel of the training attack.
    pub fn selection_attack(&self) -> Result<AttackConfig> {
        if self.attack.steps == 0 {
            let mut a = self.attack.clone();
            a.steps = self.selection_steps;
            return Ok(a);
        }
        self.attack.with_steps(self.selection_steps)
    }

    pub fn rd_config(&self) -> Result<RdConfig> {
        Ok(RdConfig {
            attack: self.selection_attack()?,
            distance: self.distance,
            branch: Branch::Adversarial,
        })
    }

    /// Augmentation strength and `ω` at `epoch`.
    pub fn contrastive_weights(&self, epoch: usize) -> Result<(f64, f64)> {
        match self.mode {
            Mode::DynAcl => {
                let s = dynacl_schedule(epoch, self.schedule.epochs, self.dynacl_period, self.dynacl_rate)?;
                Ok((self.strength * s.mu, s.omega))
            }
            _ => Ok((self.strength, self.omega)),
        }
    }

    fn batch_loss(&self, epoch: usize, attack: AttackConfig) -> Result<BatchLoss> {
        Ok(match self.mode {
            Mode::Acl | Mode::DynAcl => {
                let (strength, omega) = self.contrastive_weights(epoch)?;
                BatchLoss::Contrastive {
                    omega,
                    temperature: self.temperature,
                    strength,
                    attack,
                }
            }
            Mode::Sat => BatchLoss::Sat { attack },
            Mode::Trades => BatchLoss::Trades { c: self.trades_c, attack },
            Mode::Ce => BatchLoss::Ce,
        })
    }
}

/// One row of `epochs.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_mean: f64,
    /// `L_RD(U)` after the epoch, with the selection attack.
    pub rd_u: f64,
    pub train_steps: u64,
    pub selection_grad_evals: u64,
    pub reselected: bool,
    /// Index of the coreset in use; `None` while training on the full set.
    pub coreset_round: Option<usize>,
    pub active_batches: usize,
}

pub const EPOCH_HEADER: [&str; 9] = [
    "epoch",
    "lr",
    "loss_mean",
    "rd_u",
    "train_steps",
    "selection_grad_evals",
    "reselected",
    "coreset_round",
    "active_batches",
];

pub fn write_epochs_csv<W: Write>(records: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(EPOCH_HEADER)?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.loss_mean.to_string(),
            r.rd_u.to_string(),
            r.train_steps.to_string(),
            r.selection_grad_evals.to_string(),
            u8::from(r.reselected).to_string(),
            r.coreset_round.map(|c| c.to_string()).unwrap_or_default(),
            r.active_batches.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn save_epochs_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_epochs_csv(records, std::io::BufWriter::new(f))
}

#[derive(Debug, Clone)]
pub struct CoresetRound {
    pub epoch: usize,
    pub result: CoresetResult,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub records: Vec<EpochRecord>,
    pub coresets: Vec<CoresetRound>,
    pub partition: MinibatchPartition,
    pub wall_time: Duration,
    pub selection_time: Duration,
}

/// Unsupervised pretraining (ACL or DynACL).
pub fn pretrain_acl(model: Model, train: &Tensor, validation: &Tensor, cfg: &TrainConfig) -> Result<TrainOutput> {
    if cfg.mode.is_supervised() {
        return Err(Error::Config(format!("mode {} needs labels", cfg.mode.as_str())));
    }
    run(model, train, None, validation, cfg)
}

/// Supervised adversarial training (SAT, TRADES or plain CE). The selection
/// objective stays the label-free RD on `validation`.
pub fn pretrain_supervised(model: Model, train: &Dataset, validation: &Tensor, cfg: &TrainConfig) -> Result<TrainOutput> {
    if !cfg.mode.is_supervised() {
        return Err(Error::Config(format!("mode {} is not supervised", cfg.mode.as_str())));
    }
    let labels = train.labels().ok_or_else(|| Error::Config("supervised training needs a labeled dataset".into()))?;
    if model.config().projection_dim != train.classes() {
        return Err(Error::Config(format!(
            "head width {} differs from the {} classes",
            model.config().projection_dim,
            train.classes()
        )));
    }
    run(model, train.features(), Some(labels), validation, cfg)
}

/// Dispatches on `cfg.mode`.
pub fn pretrain(model: Model, train: &Dataset, validation: &Tensor, cfg: &TrainConfig) -> Result<TrainOutput> {
    if cfg.mode.is_supervised() {
        pretrain_supervised(model, train, validation, cfg)
    } else {
        pretrain_acl(model, train.features(), validation, cfg)
    }
}

fn run(
    mut model: Model,
    features: &Tensor,
    labels: Option<&[usize]>,
    validation: &Tensor,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    let start = Instant::now();
    cfg.validate()?;
    if features.rank() != 2 || features.shape()[0] == 0 {
        return Err(Error::EmptySet("training set"));
    }
    if validation.rank() != 2 || validation.shape()[0] == 0 {
        return Err(Error::EmptySet("validation set"));
    }
    let n = features.rows();
    let partition = MinibatchPartition::new(n, cfg.batch_size, cfg.seed)?;
    let nb = partition.num_batches();
    if cfg.method != SelectionMethod::Full {
        // Surface an unusable fraction before any training happens.
        selection_budget(n, cfg.batch_size, cfg.schedule.fraction)?;
    }
    let rd_cfg = cfg.rd_config()?;
    let sel_attack = cfg.selection_attack()?;
    let mut velocity = vec![0.0; model.param_count()];
    let mut coreset: Option<Vec<usize>> = None;
    let mut coresets = Vec::new();
    let mut records = Vec::with_capacity(cfg.schedule.epochs);
    let mut selection_time = Duration::ZERO;
    let mut step: u64 = 0;

    for epoch in 0..cfg.schedule.epochs {
        let mut selection_evals = 0;
        let reselect = cfg.method != SelectionMethod::Full && cfg.schedule.is_reselection_epoch(epoch);
        if reselect {
            let t0 = Instant::now();
            let before = model.flat_params();
            let result = select_round(&model, features, labels, validation, &partition, cfg, epoch, &rd_cfg, &sel_attack)
                .map_err(|e| Error::Selection {
                    epoch,
                    source: Box::new(e),
                })?;
            if model.flat_params() != before {
                return Err(Error::Selection {
                    epoch,
                    source: Box::new(Error::Config("selection modified the live model".into())),
                });
            }
            selection_time += t0.elapsed();
            selection_evals = result.grad_evals;
            let mut ids = result.selected.clone();
            ids.sort_unstable();
            coreset = Some(ids);
            coresets.push(CoresetRound { epoch, result });
        }

        let mut order: Vec<usize> = match &coreset {
            Some(ids) => ids.clone(),
            None => (0..nb).collect(),
        };
        order.shuffle(&mut rng::rng(rng::derive_seed(cfg.seed, tags::SHUFFLE, epoch as u64)));
        let lr = cfg.schedule.lr_at(epoch);
        let mut loss_sum = 0.0;
        for &b in &order {
            if let Some(ids) = &coreset {
                if ids.binary_search(&b).is_err() {
                    return Err(Error::Accounting(format!("epoch {epoch} consumed batch {b} outside the coreset")));
                }
            }
            let idx = partition.batch(b);
            let loss = sgd_step(&mut model, &mut velocity, features, labels, idx, cfg, epoch, step, lr, b)?;
            loss_sum += loss;
            step += 1;
        }
        let rd_u = rd_set(&model, validation, &rd_cfg)?;
        records.push(EpochRecord {
            epoch,
            lr,
            loss_mean: loss_sum / order.len() as f64,
            rd_u,
            train_steps: order.len() as u64,
            selection_grad_evals: selection_evals,
            reselected: reselect,
            coreset_round: coreset.as_ref().map(|_| coresets.len() - 1),
            active_batches: order.len(),
        });
    }

    Ok(TrainOutput {
        model,
        records,
        coresets,
        partition,
        wall_time: start.elapsed(),
        selection_time,
    })
}

#[allow(clippy::too_many_arguments)]
fn select_round(
    model: &Model,
    features: &Tensor,
    labels: Option<&[usize]>,
    validation: &Tensor,
    partition: &MinibatchPartition,
    cfg: &TrainConfig,
    epoch: usize,
    rd_cfg: &RdConfig,
    sel_attack: &AttackConfig,
) -> Result<CoresetResult> {
    let k = cfg.schedule.fraction;
    if cfg.method == SelectionMethod::Random {
        return random_select(
            partition.num_batches(),
            partition.num_points(),
            partition.batch_size(),
            k,
            rng::derive_seed(cfg.seed, tags::RANDOM_SELECT, epoch as u64),
            partition.fingerprint(),
        );
    }
    let snapshot = model.snapshot();
    let obj = selection_objective(&snapshot, features, labels, validation, partition, cfg, epoch, rd_cfg, sel_attack)?;
    let eta = cfg.schedule.selection_lr;
    match cfg.chunk {
        Some(c) => chunked_select(&obj, k, eta, c),
        None => rcs_greedy(&obj, k, eta),
    }
}

/// The objective a reselection at `epoch` optimizes: label-free contrastive
/// gradients when `labels` is `None`, otherwise the supervised loss of the
/// mode. The validation side is always the RD on `validation`.
#[allow(clippy::too_many_arguments)]
pub fn selection_objective<'a>(
    snapshot: &crate::model::ModelSnapshot,
    features: &'a Tensor,
    labels: Option<&'a [usize]>,
    validation: &'a Tensor,
    partition: &'a MinibatchPartition,
    cfg: &TrainConfig,
    epoch: usize,
    rd_cfg: &RdConfig,
    sel_attack: &AttackConfig,
) -> Result<ModelObjective<'a>> {
    let loss = cfg.batch_loss(epoch, sel_attack.clone())?;
    let seed = rng::derive_seed(cfg.seed, tags::SELECTION_AUGMENT, epoch as u64);
    match labels {
        None => ModelObjective::contrastive(snapshot, features, partition, validation, rd_cfg.clone(), loss, cfg.last_layer, seed),
        Some(y) => ModelObjective::supervised(
            snapshot,
            features,
            y,
            partition,
            validation,
            rd_cfg.clone(),
            loss,
            cfg.last_layer,
            seed,
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn sgd_step(
    model: &mut Model,
    velocity: &mut [f64],
    features: &Tensor,
    labels: Option<&[usize]>,
    idx: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
    step: u64,
    lr: f64,
    batch: usize,
) -> Result<f64> {
    let x = features.select_rows(idx);
    let mut attack = cfg.attack.clone();
    attack.seed = rng::derive_seed(cfg.seed, tags::ATTACK, step);
    let mut tape = Tape::new();
    let loss = match labels {
        None => {
            let (strength, omega) = cfg.contrastive_weights(epoch)?;
            let views = AugmentedBatch::new(&x, strength, rng::derive_seed(cfg.seed, tags::AUGMENT, step));
            update_norms(model, &views.views_i, cfg)?;
            let bound = model.bind(&mut tape, Trainable::All);
            let p = AclParams {
                omega,
                attack,
                temperature: cfg.temperature,
                reduction: Reduction::Mean,
            };
            let l = acl_loss(&mut tape, model, &bound, &views, &p)?;
            tape.backward(l)?;
            (tape.value(l).item()?, model.collect_grad(&tape, &bound))
        }
        Some(all) => {
            let y: Vec<usize> = idx.iter().map(|&i| all[i]).collect();
            update_norms(model, &x, cfg)?;
            let bound = model.bind(&mut tape, Trainable::All);
            let l = match cfg.mode {
                Mode::Sat => sat_loss(&mut tape, model, &bound, &x, &y, &attack, Reduction::Mean)?,
                Mode::Trades => trades_loss(&mut tape, model, &bound, &x, &y, cfg.trades_c, &attack, Reduction::Mean)?,
                _ => ce_loss(&mut tape, model, &bound, &x, &y, Reduction::Mean)?,
            };
            tape.backward(l)?;
            (tape.value(l).item()?, model.collect_grad(&tape, &bound))
        }
    };
    let (value, grad) = loss;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteBatchGradient { batch });
    }
    let mut theta = model.flat_params();
    for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
        *v = cfg.schedule.momentum * *v + g;
        *t -= lr * *v;
    }
    model.set_flat_params(&theta)?;
    model.round_to_f32();
    Ok(value)
}

/// Both statistic sets track the natural inputs of the batch.
fn update_norms(model: &mut Model, x: &Tensor, cfg: &TrainConfig) -> Result<()> {
    match model.config().norm {
        NormMode::None => Ok(()),
        NormMode::PerFeature => model.update_norm_stats(x, Branch::Natural, cfg.norm_momentum),
        NormMode::DualPerFeature => {
            model.update_norm_stats(x, Branch::Natural, cfg.norm_momentum)?;
            model.update_norm_stats(x, Branch::Adversarial, cfg.norm_momentum)
        }
    }
}

/// Predicted counts for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochCost {
    pub train_steps: u64,
    pub selection_grad_evals: u64,
}

/// Closed-form gradient-evaluation totals for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub num_batches: u64,
    /// Batches in every coreset.
    pub coreset_batches: u64,
    pub reselections: u64,
    /// First epoch that trains on a coreset (`E` when none does).
    pub first_coreset_epoch: u64,
    pub per_epoch: Vec<EpochCost>,
    pub total: u64,
}

/// Predicts what a run with these settings will count.
///
/// With `R` reselections, the first at epoch `r₀`, `B = ⌈N/β⌉` minibatches and
/// `b` coreset batches, an RCS run costs
/// `r₀·B + (E − r₀)·b + R·(B + b)`; random selection drops the last term.
pub fn predict_cost(n: usize, cfg: &TrainConfig) -> Result<CostModel> {
    cfg.validate()?;
    let s = &cfg.schedule;
    let (e, w, i) = (s.epochs as u64, s.warmup as u64, s.interval as u64);
    let nb = n.div_ceil(cfg.batch_size) as u64;
    if cfg.method == SelectionMethod::Full {
        return Ok(CostModel {
            num_batches: nb,
            coreset_batches: nb,
            reselections: 0,
            first_coreset_epoch: e,
            per_epoch: vec![
                EpochCost {
                    train_steps: nb,
                    selection_grad_evals: 0
                };
                s.epochs
            ],
            total: e * nb,
        });
    }
    let b = coreset_batches(n, cfg)? as u64;
    let r0 = (w.div_ceil(i) * i).min(e);
    let reselections = e.div_ceil(i) - w.div_ceil(i).min(e.div_ceil(i));
    let sel = if cfg.method == SelectionMethod::Rcs { nb + b } else { 0 };
    let per_epoch = (0..s.epochs)
        .map(|ep| EpochCost {
            train_steps: if (ep as u64) < r0 { nb } else { b },
            selection_grad_evals: if s.is_reselection_epoch(ep) { sel } else { 0 },
        })
        .collect();
    Ok(CostModel {
        num_batches: nb,
        coreset_batches: b,
        reselections,
        first_coreset_epoch: r0,
        per_epoch,
        total: r0 * nb + (e - r0) * b + reselections * sel,
    })
}

fn coreset_batches(n: usize, cfg: &TrainConfig) -> Result<usize> {
    let k = cfg.schedule.fraction;
    match (cfg.method, cfg.chunk) {
        (SelectionMethod::Rcs, Some(c)) => {
            let partition = MinibatchPartition::sequential(n, cfg.batch_size)?;
            let lens: Vec<usize> = partition.batches().iter().map(Vec::len).collect();
            let view = LenOnly { lens, batch_size: cfg.batch_size };
            Ok(chunk_budgets(&view, k, c)?.iter().sum())
        }
        _ => selection_budget(n, cfg.batch_size, k),
    }
}

/// Batch sizes without any data, enough for budget arithmetic.
struct LenOnly {
    lens: Vec<usize>,
    batch_size: usize,
}

impl crate::selection::SelectionObjective for LenOnly {
    fn theta0(&self) -> Vec<f64> {
        Vec::new()
    }
    fn num_batches(&self) -> usize {
        self.lens.len()
    }
    fn batch_len(&self, m: usize) -> usize {
        self.lens[m]
    }
    fn batch_size(&self) -> usize {
        self.batch_size
    }
    fn batch_grad(&self, _: &[f64], _: usize) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }
    fn val_loss(&self, _: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
    fn val_grad(&self, _: &[f64]) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }
}

/// Run totals against the closed-form prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupReport {
    pub wall_time: Duration,
    pub selection_time: Duration,
    pub train_steps: u64,
    pub selection_grad_evals: u64,
    pub actual: u64,
    pub predicted: u64,
    /// Cost of training every epoch on the full set.
    pub full_set: u64,
    /// `full_set / actual`.
    pub eval_speedup: f64,
}

/// Compares the counters of a finished run with [`predict_cost`]. Any
/// difference is an error naming every epoch that disagrees.
pub fn speedup_report(out: &TrainOutput, n: usize, cfg: &TrainConfig) -> Result<SpeedupReport> {
    let model = predict_cost(n, cfg)?;
    let mut diffs = Vec::new();
    if model.per_epoch.len() != out.records.len() {
        diffs.push(format!("{} epochs recorded, {} predicted", out.records.len(), model.per_epoch.len()));
    }
    for (r, p) in out.records.iter().zip(&model.per_epoch) {
        if r.train_steps != p.train_steps || r.selection_grad_evals != p.selection_grad_evals {
            diffs.push(format!(
                "epoch {}: steps {} vs {}, selection {} vs {}",
                r.epoch, r.train_steps, p.train_steps, r.selection_grad_evals, p.selection_grad_evals
            ));
        }
    }
    let train_steps: u64 = out.records.iter().map(|r| r.train_steps).sum();
    let selection: u64 = out.records.iter().map(|r| r.selection_grad_evals).sum();
    let actual = train_steps + selection;
    if actual != model.total {
        diffs.push(format!("total {actual} vs predicted {}", model.total));
    }
    if !diffs.is_empty() {
        return Err(Error::Accounting(diffs.join("; ")));
    }
    let full_set = cfg.schedule.epochs as u64 * model.num_batches;
    Ok(SpeedupReport {
        wall_time: out.wall_time,
        selection_time: out.selection_time,
        train_steps,
        selection_grad_evals: selection,
        actual,
        predicted: model.total,
        full_set,
        eval_speedup: full_set as f64 / actual as f64,
    })
}

#[cfg(test)]
mod tests;
