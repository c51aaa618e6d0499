//! What greedy selection optimizes: per-batch training gradients and a
//! validation loss, both as functions of a flat parameter vector.

use crate::attack::AttackConfig;
use crate::autodiff::{Tape, Tensor};
use crate::data::MinibatchPartition;
use crate::divergence::{rd_set, rd_set_grad, RdConfig};
use crate::error::{Error, Result};
use crate::losses::{acl_loss, ce_loss, sat_loss, trades_loss, AclParams, AugmentedBatch, Reduction};
use crate::model::{Model, ModelSnapshot, Trainable};
use crate::rng::{self, tags};

/// Parameter space `θ`, minibatch gradients `q_m(θ)` and the validation loss
/// `L(U; θ)` with its gradient.
pub trait SelectionObjective: Sync {
    /// Starting point of every selection round.
    fn theta0(&self) -> Vec<f64>;
    fn num_batches(&self) -> usize;
    /// Points in batch `m`.
    fn batch_len(&self, m: usize) -> usize;
    /// Nominal batch size `β`.
    fn batch_size(&self) -> usize;
    fn batch_grad(&self, theta: &[f64], m: usize) -> Result<Vec<f64>>;
    fn val_loss(&self, theta: &[f64]) -> Result<f64>;
    fn val_grad(&self, theta: &[f64]) -> Result<Vec<f64>>;

    /// Identifies the underlying partition.
    fn fingerprint(&self) -> u64 {
        0
    }

    fn num_points(&self) -> usize {
        (0..self.num_batches()).map(|m| self.batch_len(m)).sum()
    }
}

/// Training loss whose gradient defines `q_m`.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchLoss {
    /// Adversarial contrastive loss on two augmented views.
    Contrastive {
        omega: f64,
        temperature: f64,
        strength: f64,
        attack: AttackConfig,
    },
    Sat {
        attack: AttackConfig,
    },
    Trades {
        c: f64,
        attack: AttackConfig,
    },
    Ce,
}

/// Selection over minibatches of a real model. Gradients are taken at a
/// frozen snapshot with sum-reduced losses; `θ` covers the projection head
/// only when `last_layer` is set, otherwise every parameter.
pub struct ModelObjective<'a> {
    base: Model,
    features: &'a Tensor,
    labels: Option<&'a [usize]>,
    partition: &'a MinibatchPartition,
    validation: &'a Tensor,
    rd: RdConfig,
    loss: BatchLoss,
    last_layer: bool,
    seed: u64,
}

impl<'a> ModelObjective<'a> {
    /// Label-free objective: the contrastive loss sees only `features`.
    #[allow(clippy::too_many_arguments)]
    pub fn contrastive(
        snapshot: &ModelSnapshot,
        features: &'a Tensor,
        partition: &'a MinibatchPartition,
        validation: &'a Tensor,
        rd: RdConfig,
        loss: BatchLoss,
        last_layer: bool,
        seed: u64,
    ) -> Result<Self> {
        if !matches!(loss, BatchLoss::Contrastive { .. }) {
            return Err(Error::Config("contrastive selection needs a contrastive batch loss".into()));
        }
        Self::build(snapshot, features, None, partition, validation, rd, loss, last_layer, seed)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn supervised(
        snapshot: &ModelSnapshot,
        features: &'a Tensor,
        labels: &'a [usize],
        partition: &'a MinibatchPartition,
        validation: &'a Tensor,
        rd: RdConfig,
        loss: BatchLoss,
        last_layer: bool,
        seed: u64,
    ) -> Result<Self> {
        if matches!(loss, BatchLoss::Contrastive { .. }) {
            return Err(Error::Config("supervised selection needs a supervised batch loss".into()));
        }
        Self::build(snapshot, features, Some(labels), partition, validation, rd, loss, last_layer, seed)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        snapshot: &ModelSnapshot,
        features: &'a Tensor,
        labels: Option<&'a [usize]>,
        partition: &'a MinibatchPartition,
        validation: &'a Tensor,
        rd: RdConfig,
        loss: BatchLoss,
        last_layer: bool,
        seed: u64,
    ) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] != partition.num_points() {
            return Err(Error::Config("partition does not match the training features".into()));
        }
        if validation.rank() != 2 || validation.shape()[0] == 0 {
            return Err(Error::EmptySet("validation set"));
        }
        Ok(Self {
            base: snapshot.restore(),
            features,
            labels,
            partition,
            validation,
            rd,
            loss,
            last_layer,
            seed,
        })
    }

    fn trainable(&self) -> Trainable {
        if self.last_layer {
            Trainable::HeadOnly
        } else {
            Trainable::All
        }
    }

    /// The snapshot model with `θ` written into the selection coordinates.
    pub fn model_at(&self, theta: &[f64]) -> Result<Model> {
        let mut m = self.base.clone();
        if self.last_layer {
            m.set_head_params(theta)?;
        } else {
            m.set_flat_params(theta)?;
        }
        Ok(m)
    }

    /// Augmentation stream for a batch depends on its contents only, so
    /// identical batches yield identical gradients.
    fn augment_seed(&self, x: &Tensor) -> u64 {
        rng::content_seed(rng::derive_seed(self.seed, tags::SELECTION_AUGMENT, 0), x.data())
    }
}

impl SelectionObjective for ModelObjective<'_> {
    fn theta0(&self) -> Vec<f64> {
        if self.last_layer {
            self.base.last_layer_params()
        } else {
            self.base.flat_params()
        }
    }

    fn num_batches(&self) -> usize {
        self.partition.num_batches()
    }

    fn batch_len(&self, m: usize) -> usize {
        self.partition.batch(m).len()
    }

    fn batch_size(&self) -> usize {
        self.partition.batch_size()
    }

    fn fingerprint(&self) -> u64 {
        self.partition.fingerprint()
    }

    fn batch_grad(&self, theta: &[f64], m: usize) -> Result<Vec<f64>> {
        let model = self.model_at(theta)?;
        let idx = self.partition.batch(m);
        let x = self.features.select_rows(idx);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, self.trainable());
        let loss = match &self.loss {
            BatchLoss::Contrastive {
                omega,
                temperature,
                strength,
                attack,
            } => {
                let batch = AugmentedBatch::new(&x, *strength, self.augment_seed(&x));
                let p = AclParams {
                    omega: *omega,
                    attack: attack.clone(),
                    temperature: *temperature,
                    reduction: Reduction::Sum,
                };
                acl_loss(&mut tape, &model, &bound, &batch, &p)?
            }
            supervised => {
                let all = self.labels.ok_or_else(|| Error::Config("supervised loss without labels".into()))?;
                let y: Vec<usize> = idx.iter().map(|&i| all[i]).collect();
                match supervised {
                    BatchLoss::Sat { attack } => sat_loss(&mut tape, &model, &bound, &x, &y, attack, Reduction::Sum)?,
                    BatchLoss::Trades { c, attack } => {
                        trades_loss(&mut tape, &model, &bound, &x, &y, *c, attack, Reduction::Sum)?
                    }
                    _ => ce_loss(&mut tape, &model, &bound, &x, &y, Reduction::Sum)?,
                }
            }
        };
        tape.backward(loss)?;
        Ok(model.collect_grad(&tape, &bound))
    }

    fn val_loss(&self, theta: &[f64]) -> Result<f64> {
        rd_set(&self.model_at(theta)?, self.validation, &self.rd)
    }

    fn val_grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(rd_set_grad(&self.model_at(theta)?, self.validation, &self.rd, self.trainable())?.1)
    }
}

/// Smooth toy objective with constant batch gradients:
/// `L(θ) = ½‖Aθ − b‖² + c·Σθᵢ⁴`. Its exact marginal gains are cheap, which
/// makes it a clean test bed for the first-order gain approximation.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    a: Tensor,
    b: Vec<f64>,
    quartic: f64,
    grads: Vec<Vec<f64>>,
    theta0: Vec<f64>,
    batch_size: usize,
}

impl QuadraticObjective {
    pub fn random(dim: usize, batches: usize, quartic: f64, seed: u64) -> Self {
        use rand::Rng as _;
        let mut r = rng::rng(seed);
        let mut u = |s: f64| r.random_range(-s..s);
        let a = Tensor::matrix(dim, dim, (0..dim * dim).map(|_| u(1.0)).collect()).expect("square");
        let b = (0..dim).map(|_| u(1.0)).collect();
        let theta0 = (0..dim).map(|_| u(1.0)).collect();
        let grads = (0..batches).map(|_| (0..dim).map(|_| u(1.0)).collect()).collect();
        Self {
            a,
            b,
            quartic,
            grads,
            theta0,
            batch_size: 8,
        }
    }

    fn residual(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.b.len();
        (0..n)
            .map(|i| self.a.row(i).iter().zip(theta).map(|(x, t)| x * t).sum::<f64>() - self.b[i])
            .collect()
    }
}

impl SelectionObjective for QuadraticObjective {
    fn theta0(&self) -> Vec<f64> {
        self.theta0.clone()
    }

    fn num_batches(&self) -> usize {
        self.grads.len()
    }

    fn batch_len(&self, _m: usize) -> usize {
        self.batch_size
    }

    fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn batch_grad(&self, _theta: &[f64], m: usize) -> Result<Vec<f64>> {
        Ok(self.grads[m].clone())
    }

    fn val_loss(&self, theta: &[f64]) -> Result<f64> {
        let r = self.residual(theta);
        Ok(0.5 * r.iter().map(|v| v * v).sum::<f64>() + self.quartic * theta.iter().map(|t| t.powi(4)).sum::<f64>())
    }

    fn val_grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let r = self.residual(theta);
        let n = theta.len();
        Ok((0..n)
            .map(|j| {
                (0..r.len()).map(|i| self.a.row(i)[j] * r[i]).sum::<f64>() + 4.0 * self.quartic * theta[j].powi(3)
            })
            .collect())
    }
}
