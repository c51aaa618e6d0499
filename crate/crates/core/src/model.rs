//! MLP feature extractor `f` and projection head `g`, composed as `h = g ∘ f`.
//!
//! Parameters are kept as a list of tensors in declaration order:
//! encoder `(W, b)` pairs first, head pairs last. Weight matrices are
//! `[fan_in, fan_out]` and applied as `x W + b`. ReLU follows every encoder
//! layer except the one producing the embedding; a two-layer head has a ReLU
//! between its layers. Optional per-feature normalization sits between each
//! hidden linear map and its ReLU and uses running statistics only, so the
//! forward pass of one point never depends on other points in the batch.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::Rng as _;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    None,
    PerFeature,
    /// Separate statistics for natural and adversarial inputs.
    DualPerFeature,
}

impl NormMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Self::None),
            "per-feature" => Some(Self::PerFeature),
            "dual-per-feature" => Some(Self::DualPerFeature),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::PerFeature => "per-feature",
            Self::DualPerFeature => "dual-per-feature",
        }
    }

    fn code(self) -> u32 {
        match self {
            Self::None => 0,
            Self::PerFeature => 1,
            Self::DualPerFeature => 2,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(Self::None),
            1 => Some(Self::PerFeature),
            2 => Some(Self::DualPerFeature),
            _ => None,
        }
    }

    fn sets(self) -> usize {
        match self {
            Self::None => 0,
            Self::PerFeature => 1,
            Self::DualPerFeature => 2,
        }
    }
}

/// Which normalization statistics a forward pass reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Natural,
    Adversarial,
}

impl Branch {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "natural" => Some(Self::Natural),
            "adversarial" => Some(Self::Adversarial),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Natural => "natural",
            Self::Adversarial => "adversarial",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub projection_dim: usize,
    /// Width of the hidden layer of a two-layer head; `None` for a single linear head.
    pub head_hidden: Option<usize>,
    pub norm: NormMode,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(input_dim: usize, hidden: Vec<usize>, embedding_dim: usize, projection_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            embedding_dim,
            projection_dim,
            head_hidden: None,
            norm: NormMode::None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::Config("model needs at least one hidden layer".into()));
        }
        let dims_ok = self.input_dim >= 1
            && self.embedding_dim >= 1
            && self.projection_dim >= 1
            && self.hidden.iter().all(|&h| h >= 1)
            && self.head_hidden.is_none_or(|h| h >= 1);
        if !dims_ok {
            return Err(Error::Config("all model dimensions must be at least 1".into()));
        }
        Ok(())
    }

    fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.embedding_dim);
        dims
    }

    fn head_dims(&self) -> Vec<usize> {
        match self.head_hidden {
            Some(h) => vec![self.embedding_dim, h, self.projection_dim],
            None => vec![self.embedding_dim, self.projection_dim],
        }
    }

    fn layer_shapes(&self) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let pairs = |d: Vec<usize>| d.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>();
        (pairs(self.encoder_dims()), pairs(self.head_dims()))
    }
}

/// Running per-feature statistics for every normalized hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormSet {
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

impl NormSet {
    fn fresh(widths: &[usize]) -> Self {
        Self {
            means: widths.iter().map(|&w| vec![0.0; w]).collect(),
            vars: widths.iter().map(|&w| vec![1.0; w]).collect(),
        }
    }
}

/// Which parameters a forward pass exposes as differentiable leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    HeadOnly,
    Nothing,
}

/// Parameter handles on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    trainable: Trainable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: EncoderConfig,
    params: Vec<Tensor>,
    norm_sets: Vec<NormSet>,
}

/// Frozen by-value copy of a model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    config: EncoderConfig,
    params: Vec<f64>,
    norm_sets: Vec<NormSet>,
}

impl ModelSnapshot {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn restore(&self) -> Model {
        let mut m = Model::zeroed(self.config.clone());
        m.set_flat_params(&self.params).expect("snapshot length matches its config");
        m.norm_sets = self.norm_sets.clone();
        m
    }
}

impl Model {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero, drawn from `config.seed`.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(rng::derive_seed(config.seed, rng::tags::MODEL_INIT, 0));
        let (enc, head) = config.layer_shapes();
        let mut params = Vec::new();
        for &(fan_in, fan_out) in enc.iter().chain(&head) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| r.random_range(-bound..bound)).collect();
            params.push(Tensor::matrix(fan_in, fan_out, w)?);
            params.push(Tensor::zeros(&[fan_out]));
        }
        let widths = config.hidden.clone();
        let norm_sets = (0..config.norm.sets()).map(|_| NormSet::fresh(&widths)).collect();
        Ok(Self {
            config,
            params,
            norm_sets,
        })
    }

    fn zeroed(config: EncoderConfig) -> Self {
        let (enc, head) = config.layer_shapes();
        let mut params = Vec::new();
        for &(fan_in, fan_out) in enc.iter().chain(&head) {
            params.push(Tensor::zeros(&[fan_in, fan_out]));
            params.push(Tensor::zeros(&[fan_out]));
        }
        let widths = config.hidden.clone();
        let norm_sets = (0..config.norm.sets()).map(|_| NormSet::fresh(&widths)).collect();
        Self {
            config,
            params,
            norm_sets,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn encoder_tensor_count(&self) -> usize {
        2 * (self.config.hidden.len() + 1)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.params[..self.encoder_tensor_count()].iter().map(Tensor::numel).sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.param_count() - self.encoder_param_count()
    }

    /// Flat-vector range of the projection head's parameters.
    pub fn head_range(&self) -> Range<usize> {
        self.encoder_param_count()..self.param_count()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for p in &self.params {
            v.extend_from_slice(p.data());
        }
        v
    }

    /// Copy of the head coordinates of the flat parameter vector.
    pub fn last_layer_params(&self) -> Vec<f64> {
        self.flat_params()[self.head_range()].to_vec()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.numel();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Overwrites the head coordinates only.
    pub fn set_head_params(&mut self, head: &[f64]) -> Result<()> {
        let mut flat = self.flat_params();
        let range = self.head_range();
        if head.len() != range.len() {
            return Err(Error::Config(format!(
                "expected {} head parameters, got {}",
                range.len(),
                head.len()
            )));
        }
        flat[range].copy_from_slice(head);
        self.set_flat_params(&flat)
    }

    /// Rounds every parameter and statistic to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        for set in &mut self.norm_sets {
            for v in set.means.iter_mut().chain(set.vars.iter_mut()).flatten() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            config: self.config.clone(),
            params: self.flat_params(),
            norm_sets: self.norm_sets.clone(),
        }
    }

    /// Loads a snapshot into this model; configurations must match.
    pub fn restore_from(&mut self, snap: &ModelSnapshot) -> Result<()> {
        if snap.config != self.config {
            return Err(Error::ConfigMismatch);
        }
        self.set_flat_params(&snap.params)?;
        self.norm_sets = snap.norm_sets.clone();
        Ok(())
    }

    pub fn norm_sets(&self) -> &[NormSet] {
        &self.norm_sets
    }

    fn norm_set_index(&self, branch: Branch) -> Option<usize> {
        match (self.config.norm, branch) {
            (NormMode::None, _) => None,
            (NormMode::PerFeature, _) => Some(0),
            (NormMode::DualPerFeature, Branch::Natural) => Some(0),
            (NormMode::DualPerFeature, Branch::Adversarial) => Some(1),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> Bound {
        let enc = self.encoder_tensor_count();
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let train = match trainable {
                    Trainable::All => true,
                    Trainable::HeadOnly => i >= enc,
                    Trainable::Nothing => false,
                };
                if train {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        Bound { vars, trainable }
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.config.input_dim {
            return Err(crate::autodiff::TensorError::ShapeMismatch {
                op: "embed",
                left: s.to_vec(),
                right: vec![usize::MAX, self.config.input_dim],
            }
            .into());
        }
        Ok(())
    }

    /// `f(x)`: `[n, input_dim] -> [n, embedding_dim]`.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, x: Var, branch: Branch) -> Result<Var> {
        self.check_input(tape, x)?;
        let layers = self.config.hidden.len() + 1;
        let set = self.norm_set_index(branch);
        let mut a = x;
        for l in 0..layers {
            a = tape.matmul(a, bound.vars[2 * l])?;
            a = tape.add_row(a, bound.vars[2 * l + 1])?;
            if l + 1 < layers {
                if let Some(s) = set {
                    a = self.normalize(tape, a, s, l)?;
                }
                a = tape.relu(a);
            }
        }
        Ok(a)
    }

    fn normalize(&self, tape: &mut Tape, a: Var, set: usize, layer: usize) -> Result<Var> {
        let stats = &self.norm_sets[set];
        let neg_mean = tape.constant(Tensor::vector(stats.means[layer].iter().map(|m| -m).collect()));
        let centered = tape.add_row(a, neg_mean)?;
        let w = stats.vars[layer].len();
        let mut diag = Tensor::zeros(&[w, w]);
        for (i, v) in stats.vars[layer].iter().enumerate() {
            diag.data_mut()[i * w + i] = 1.0 / (v + NORM_EPS).sqrt();
        }
        let d = tape.constant(diag);
        Ok(tape.matmul(centered, d)?)
    }

    /// `g(z)`: `[n, embedding_dim] -> [n, projection_dim]`.
    pub fn project(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let base = self.encoder_tensor_count();
        let head_layers = (self.params.len() - base) / 2;
        let mut a = z;
        for l in 0..head_layers {
            a = tape.matmul(a, bound.vars[base + 2 * l])?;
            a = tape.add_row(a, bound.vars[base + 2 * l + 1])?;
            if l + 1 < head_layers {
                a = tape.relu(a);
            }
        }
        Ok(a)
    }

    /// `h(x) = g(f(x))`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, branch: Branch) -> Result<Var> {
        let z = self.embed(tape, bound, x, branch)?;
        self.project(tape, bound, z)
    }

    /// Gradient of the last backward pass for the bound's trainable coordinates,
    /// flattened in declaration order (the head slice when bound `HeadOnly`).
    pub fn collect_grad(&self, tape: &Tape, bound: &Bound) -> Vec<f64> {
        let start = match bound.trainable {
            Trainable::All => 0,
            Trainable::HeadOnly => self.encoder_tensor_count(),
            Trainable::Nothing => bound.vars.len(),
        };
        let mut g = Vec::new();
        for &v in &bound.vars[start..] {
            g.extend_from_slice(tape.grad(v).data());
        }
        g
    }

    pub fn h_values(&self, x: &Tensor, branch: Branch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, Trainable::Nothing);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &b, xv, branch)?;
        Ok(tape.value(out).clone())
    }

    pub fn embed_values(&self, x: &Tensor, branch: Branch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, Trainable::Nothing);
        let xv = tape.constant(x.clone());
        let out = self.embed(&mut tape, &b, xv, branch)?;
        Ok(tape.value(out).clone())
    }

    /// Moves the running statistics of `branch` toward the batch statistics of
    /// each hidden pre-activation. Other branches are untouched. No-op when
    /// normalization is off or the batch is empty.
    pub fn update_norm_stats(&mut self, x: &Tensor, branch: Branch, momentum: f64) -> Result<()> {
        let Some(set) = self.norm_set_index(branch) else {
            return Ok(());
        };
        let n = x.rows();
        if n == 0 || x.numel() == 0 {
            return Ok(());
        }
        let mut a = x.clone();
        for l in 0..self.config.hidden.len() {
            let w = &self.params[2 * l];
            let b = &self.params[2 * l + 1];
            let (fi, fo) = (w.shape()[0], w.shape()[1]);
            let mut pre = crate::autodiff::matmul_raw(a.data(), w.data(), n, fi, fo);
            for row in pre.chunks_mut(fo) {
                for (v, bb) in row.iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
            let mut mean = vec![0.0; fo];
            for row in pre.chunks(fo) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v / n as f64;
                }
            }
            let mut var = vec![0.0; fo];
            for row in pre.chunks(fo) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m) / n as f64;
                }
            }
            let stats = &mut self.norm_sets[set];
            for j in 0..fo {
                stats.means[l][j] = (1.0 - momentum) * stats.means[l][j] + momentum * mean[j];
                stats.vars[l][j] = (1.0 - momentum) * stats.vars[l][j] + momentum * var[j];
            }
            // Propagate with the freshly updated statistics.
            let stats = &self.norm_sets[set];
            for row in pre.chunks_mut(fo) {
                for j in 0..fo {
                    let v = (row[j] - stats.means[l][j]) / (stats.vars[l][j] + NORM_EPS).sqrt();
                    row[j] = v.max(0.0);
                }
            }
            a = Tensor::matrix(n, fo, pre)?;
        }
        Ok(())
    }

    /// Product of weight Frobenius norms: an upper bound on the L2 Lipschitz
    /// constant of `h` when normalization is off.
    pub fn lipschitz_bound(&self) -> f64 {
        self.params.iter().step_by(2).map(Tensor::norm).product()
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RCSM";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes an `RCSM` checkpoint.
///
/// Layout (little-endian): magic `RCSM`, version `u32`, then the config
/// block `input_dim u32, hidden_count u32, hidden widths u32..., embedding_dim
/// u32, projection_dim u32, head_hidden u32 (0 = single layer), norm u32
/// (0 none, 1 per-feature, 2 dual), seed u64`, then `param_count u64` and the
/// parameters as `f32` in declaration order, then for each statistics set and
/// each hidden layer the means followed by the variances as `f32`.
pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(c.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(c.hidden.len() as u32).to_le_bytes());
    for &h in &c.hidden {
        out.extend_from_slice(&(h as u32).to_le_bytes());
    }
    out.extend_from_slice(&(c.embedding_dim as u32).to_le_bytes());
    out.extend_from_slice(&(c.projection_dim as u32).to_le_bytes());
    out.extend_from_slice(&(c.head_hidden.unwrap_or(0) as u32).to_le_bytes());
    out.extend_from_slice(&c.norm.code().to_le_bytes());
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for v in model.flat_params() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for set in &model.norm_sets {
        for (m, v) in set.means.iter().zip(&set.vars) {
            for x in m.iter().chain(v) {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn write_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f32(&mut self) -> Option<f64> {
        self.take(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
    }
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<Model> {
    let bad = |d: &str| Error::format(path, d.to_string());
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(bad("missing RCSM magic"));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let mut read_config = || -> Option<EncoderConfig> {
        let input_dim = r.u32()? as usize;
        let nh = r.u32()? as usize;
        let hidden = (0..nh).map(|_| r.u32().map(|v| v as usize)).collect::<Option<Vec<_>>>()?;
        let embedding_dim = r.u32()? as usize;
        let projection_dim = r.u32()? as usize;
        let hh = r.u32()? as usize;
        let norm = NormMode::from_code(r.u32()?)?;
        let seed = r.u64()?;
        Some(EncoderConfig {
            input_dim,
            hidden,
            embedding_dim,
            projection_dim,
            head_hidden: (hh > 0).then_some(hh),
            norm,
            seed,
        })
    };
    let config = read_config().ok_or_else(|| bad("truncated or invalid config block"))?;
    config.validate()?;
    let mut model = Model::zeroed(config);
    let count = r.u64().ok_or_else(|| bad("truncated parameter count"))? as usize;
    if count != model.param_count() {
        return Err(bad("parameter count does not match config"));
    }
    let flat = (0..count).map(|_| r.f32()).collect::<Option<Vec<_>>>().ok_or_else(|| bad("truncated parameters"))?;
    model.set_flat_params(&flat)?;
    for set in &mut model.norm_sets {
        for (m, v) in set.means.iter_mut().zip(set.vars.iter_mut()) {
            for x in m.iter_mut().chain(v.iter_mut()) {
                *x = r.f32().ok_or_else(|| bad("truncated normalization statistics"))?;
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(model)
}

pub fn read_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_gradient, relative_error};

    fn small(seed: u64) -> Model {
        let mut c = EncoderConfig::new(4, vec![8], 4, 2);
        c.seed = seed;
        Model::new(c).unwrap()
    }

    fn batch(n: usize, d: usize, seed: u64) -> Tensor {
        let mut r = rng::rng(seed);
        Tensor::matrix(n, d, (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn param_count_matches_layer_shapes() {
        let m = small(0);
        assert_eq!(m.param_count(), (4 * 8 + 8) + (8 * 4 + 4) + (4 * 2 + 2));
        assert_eq!(m.param_count(), 86);
        assert_eq!(m.head_param_count(), 10);
        assert_eq!(m.param_count() - m.head_param_count(), m.encoder_param_count());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        assert_eq!(small(3).flat_params(), small(3).flat_params());
        assert_ne!(small(3).flat_params(), small(4).flat_params());
        let m = small(3);
        for (i, p) in m.params().iter().enumerate() {
            if i % 2 == 1 {
                assert!(p.data().iter().all(|&v| v == 0.0));
            } else {
                let bound = 1.0 / (p.shape()[0] as f64).sqrt();
                assert!(p.data().iter().all(|v| v.abs() <= bound));
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(Model::new(EncoderConfig::new(4, vec![], 4, 2)).is_err());
        assert!(Model::new(EncoderConfig::new(0, vec![3], 4, 2)).is_err());
    }

    #[test]
    fn output_shapes_and_empty_batch() {
        let m = small(1);
        let h = m.h_values(&batch(5, 4, 2), Branch::Natural).unwrap();
        assert_eq!(h.shape(), &[5, 2]);
        assert_eq!(m.embed_values(&batch(5, 4, 2), Branch::Natural).unwrap().shape(), &[5, 4]);
        let empty = Tensor::zeros(&[0, 4]);
        assert_eq!(m.h_values(&empty, Branch::Natural).unwrap().shape(), &[0, 2]);
        assert!(m.h_values(&batch(2, 3, 0), Branch::Natural).is_err());
    }

    #[test]
    fn zero_weights_give_constant_output() {
        let mut m = small(1);
        m.set_flat_params(&vec![0.0; m.param_count()]).unwrap();
        let h = m.h_values(&batch(6, 4, 9), Branch::Natural).unwrap();
        for i in 1..6 {
            assert_eq!(h.row(i), h.row(0));
        }
    }

    #[test]
    fn mean_output_gradient_matches_finite_differences() {
        let m = small(7);
        let x = batch(3, 4, 8);
        let value = |theta: &Tensor| -> std::result::Result<f64, crate::autodiff::TensorError> {
            let mut mm = m.clone();
            mm.set_flat_params(theta.data()).unwrap();
            Ok(mm.h_values(&x, Branch::Natural).unwrap().sum() / 6.0)
        };
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, Trainable::All);
        let xv = tape.constant(x.clone());
        let h = m.forward(&mut tape, &b, xv, Branch::Natural).unwrap();
        let l = tape.mean(h);
        tape.backward(l).unwrap();
        let ad = m.collect_grad(&tape, &b);
        let fd = finite_difference_gradient(value, &Tensor::vector(m.flat_params()), 1e-5).unwrap();
        assert!(relative_error(&ad, fd.data(), 1e-10) <= 1e-4);
    }

    #[test]
    fn head_gradient_is_restriction_of_full_gradient() {
        let m = small(5);
        let x = batch(4, 4, 1);
        let grad = |t: Trainable| {
            let mut tape = Tape::new();
            let b = m.bind(&mut tape, t);
            let xv = tape.constant(x.clone());
            let h = m.forward(&mut tape, &b, xv, Branch::Natural).unwrap();
            let sq = tape.mul(h, h).unwrap();
            let l = tape.sum(sq);
            tape.backward(l).unwrap();
            m.collect_grad(&tape, &b)
        };
        let full = grad(Trainable::All);
        let head = grad(Trainable::HeadOnly);
        assert_eq!(head.len(), m.head_param_count());
        assert_eq!(&full[m.head_range()], head.as_slice());
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let mut m = small(2);
        let x = batch(4, 4, 3);
        let before = m.h_values(&x, Branch::Natural).unwrap();
        let snap = m.snapshot();
        assert_eq!(snap.params(), m.snapshot().params());
        let norm = Tensor::vector(m.flat_params()).norm();
        assert_eq!(Tensor::vector(snap.params().to_vec()).norm(), norm);
        // mutate live model
        let mut p = m.flat_params();
        for v in &mut p {
            *v -= 0.1;
        }
        m.set_flat_params(&p).unwrap();
        assert_ne!(m.h_values(&x, Branch::Natural).unwrap(), before);
        assert_eq!(snap.restore().h_values(&x, Branch::Natural).unwrap(), before);
        m.restore_from(&snap).unwrap();
        assert_eq!(m.h_values(&x, Branch::Natural).unwrap(), before);
        let other = Model::new(EncoderConfig::new(4, vec![8], 4, 3)).unwrap();
        assert!(matches!(m.clone().restore_from(&other.snapshot()), Err(Error::ConfigMismatch)));
    }

    #[test]
    fn dual_norm_branches_are_independent() {
        let mut c = EncoderConfig::new(4, vec![6, 5], 3, 2);
        c.norm = NormMode::DualPerFeature;
        let mut m = Model::new(c).unwrap();
        let before_adv = m.norm_sets()[1].clone();
        m.update_norm_stats(&batch(16, 4, 1), Branch::Natural, 0.5).unwrap();
        assert_eq!(m.norm_sets()[1], before_adv);
        assert_ne!(m.norm_sets()[0], before_adv);
        let after_nat = m.norm_sets()[0].clone();
        m.update_norm_stats(&batch(16, 4, 2), Branch::Adversarial, 0.5).unwrap();
        assert_eq!(m.norm_sets()[0], after_nat);
        assert_ne!(m.norm_sets()[1], before_adv);
        // Branch outputs now differ.
        let x = batch(3, 4, 4);
        assert_ne!(
            m.h_values(&x, Branch::Natural).unwrap(),
            m.h_values(&x, Branch::Adversarial).unwrap()
        );
    }

    #[test]
    fn lipschitz_smoke() {
        let m = small(11);
        let c = m.lipschitz_bound();
        let mut r = rng::rng(1);
        for _ in 0..50 {
            let x = batch(1, 4, r.random());
            let mut xd = x.clone();
            for v in xd.data_mut() {
                *v += r.random_range(-1e-3..1e-3);
            }
            let dx = Tensor::vector(x.data().iter().zip(xd.data()).map(|(a, b)| a - b).collect()).norm();
            let h0 = m.h_values(&x, Branch::Natural).unwrap();
            let h1 = m.h_values(&xd, Branch::Natural).unwrap();
            let dh = Tensor::vector(h0.data().iter().zip(h1.data()).map(|(a, b)| a - b).collect()).norm();
            assert!(dh <= c * dx + 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_lossless_for_f32_params() {
        let mut c = EncoderConfig::new(3, vec![5], 4, 2);
        c.norm = NormMode::DualPerFeature;
        c.head_hidden = Some(3);
        let mut m = Model::new(c).unwrap();
        m.update_norm_stats(&batch(8, 3, 3), Branch::Natural, 0.3).unwrap();
        m.round_to_f32();
        let bytes = checkpoint_bytes(&m);
        assert_eq!(&bytes[..4], b"RCSM");
        let back = parse_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert!(parse_checkpoint(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(parse_checkpoint(&wrong, Path::new("mem")).is_err());
    }
}
