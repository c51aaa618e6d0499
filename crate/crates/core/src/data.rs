//! Datasets, the `RCSD` file format, validation splits, and minibatch partitions.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, tags};

/// Points with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Option<Vec<usize>>,
    classes: usize,
}

impl Dataset {
    /// `features` must be `[n, d]`; labels, when present, must be `< classes`.
    pub fn new(features: Tensor, labels: Option<Vec<usize>>, classes: usize) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::Config(format!("features must be a matrix, got shape {:?}", features.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != features.shape()[0] {
                return Err(Error::Config("label count differs from point count".into()));
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= classes) {
                return Err(Error::LabelOutOfRange { label: bad, classes });
            }
        }
        let classes = if labels.is_some() { classes } else { 0 };
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            classes: self.classes,
        }
    }

    /// Copy without labels, for code paths that must stay label-free.
    pub fn unlabeled(&self) -> Dataset {
        Dataset {
            features: self.features.clone(),
            labels: None,
            classes: 0,
        }
    }
}

/// Gaussian-mixture generator: class means drawn from `N(0, separation²)` per
/// coordinate, points drawn around their class mean with std `noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.dim == 0 || self.classes == 0 {
            return Err(Error::Config("data.n, data.dim and data.classes must be at least 1".into()));
        }
        if !(self.separation >= 0.0 && self.noise > 0.0 && self.separation.is_finite() && self.noise.is_finite()) {
            return Err(Error::Config("data.separation must be >= 0 and data.noise > 0".into()));
        }
        Ok(())
    }

    /// Class means, row `c` for class `c`.
    pub fn class_means(&self) -> Tensor {
        let mut r = rng::rng(rng::derive_seed(self.seed, tags::DATA, 0));
        let normal = Normal::new(0.0, self.separation.max(f64::MIN_POSITIVE)).expect("valid std");
        let data = (0..self.classes * self.dim)
            .map(|_| if self.separation == 0.0 { 0.0 } else { normal.sample(&mut r) })
            .collect();
        Tensor::matrix(self.classes, self.dim, data).expect("consistent shape")
    }
}

/// Generates a labeled mixture. Labels cycle through the classes before
/// shuffling, so class counts differ by at most one (exactly balanced when
/// `n % classes == 0`). Features are rounded to `f32` so the dataset survives
/// a round trip through the file format unchanged.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let means = spec.class_means();
    let mut r = rng::rng(rng::derive_seed(spec.seed, tags::DATA, 1));
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut r);
    let noise = Normal::new(0.0, spec.noise).expect("validated std");
    let mut data = Vec::with_capacity(spec.n * spec.dim);
    for &y in &labels {
        for j in 0..spec.dim {
            let v = means.row(y)[j] + noise.sample(&mut r);
            data.push(v as f32 as f64);
        }
    }
    Dataset::new(Tensor::matrix(spec.n, spec.dim, data)?, Some(labels), spec.classes)
}

const DATASET_MAGIC: &[u8; 4] = b"RCSD";
const DATASET_VERSION: u32 = 1;

/// `RCSD` bytes: magic, version `u32`, `n u64`, `d u32`, `C u32` (0 when
/// unlabeled), `n·d` little-endian `f32` features, then `n` `u32` labels if `C > 0`.
pub fn dataset_bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + ds.len() * (ds.dim() + 1) * 4);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.dim() as u32).to_le_bytes());
    let classes = if ds.labels.is_some() { ds.classes as u32 } else { 0 };
    out.extend_from_slice(&classes.to_le_bytes());
    for v in ds.features.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if let Some(labels) = &ds.labels {
        for &y in labels {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
    }
    out
}

pub fn parse_dataset(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let bad = |d: &str| Error::format(path, d.to_string());
    if bytes.len() < 24 || &bytes[..4] != DATASET_MAGIC {
        return Err(bad("missing RCSD header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != DATASET_VERSION {
        return Err(bad(&format!("unsupported dataset version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let d = u32_at(16) as usize;
    let classes = u32_at(20) as usize;
    let label_bytes = if classes > 0 { n * 4 } else { 0 };
    let expected = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_mul(4))
        .and_then(|b| b.checked_add(24 + label_bytes));
    if expected != Some(bytes.len()) {
        return Err(bad("file length does not match header"));
    }
    let feats = bytes[24..24 + n * d * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let labels = (classes > 0).then(|| {
        bytes[24 + n * d * 4..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect()
    });
    Dataset::new(Tensor::matrix(n, d, feats)?, labels, classes)
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, dataset_bytes(ds)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&bytes, path)
}

/// Seeded index split into `(train, validation)`; the validation part holds
/// `max(1, round(fraction·n))` points and both parts are sorted.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction must be in (0, 1), got {fraction}")));
    }
    let m = ((fraction * n as f64).round() as usize).max(1);
    if m >= n {
        return Err(Error::Config(format!("cannot hold out {m} of {n} points")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::rng(rng::derive_seed(seed, tags::SPLIT, 0)));
    let mut val = idx[..m].to_vec();
    let mut train = idx[m..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Ordered minibatches with stable ids. Points are shuffled once with the
/// partition seed and then cut into consecutive groups of `batch_size`; the
/// last group may be smaller.
#[derive(Debug, Clone, PartialEq)]
pub struct MinibatchPartition {
    batches: Vec<Vec<usize>>,
    n: usize,
    batch_size: usize,
}

impl MinibatchPartition {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if n == 0 {
            return Err(Error::EmptySet("training set"));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::rng(rng::derive_seed(seed, tags::PARTITION, 0)));
        Ok(Self::from_order(idx, batch_size))
    }

    /// Consecutive batches over `0..n` without shuffling.
    pub fn sequential(n: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if n == 0 {
            return Err(Error::EmptySet("training set"));
        }
        Ok(Self::from_order((0..n).collect(), batch_size))
    }

    fn from_order(order: Vec<usize>, batch_size: usize) -> Self {
        let n = order.len();
        let batches = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
        Self { batches, n, batch_size }
    }

    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }

    pub fn num_points(&self) -> usize {
        self.n
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batch(&self, id: usize) -> &[usize] {
        &self.batches[id]
    }

    pub fn batches(&self) -> &[Vec<usize>] {
        &self.batches
    }

    /// Hash of the exact batch contents; equal partitions share a fingerprint.
    pub fn fingerprint(&self) -> u64 {
        let mut h = rng::mix64(self.n as u64 ^ ((self.batch_size as u64) << 32));
        for b in &self.batches {
            h = rng::mix64(h ^ b.len() as u64);
            for &i in b {
                h = rng::mix64(h ^ i as u64);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, classes: usize) -> SyntheticSpec {
        SyntheticSpec {
            n,
            dim: 3,
            classes,
            separation: 2.0,
            noise: 0.5,
            seed: 4,
        }
    }

    #[test]
    fn balanced_labels() {
        let ds = gen_synthetic(&spec(10, 2)).unwrap();
        let ones = ds.labels().unwrap().iter().filter(|&&y| y == 1).count();
        assert_eq!(ones, 5);
    }

    #[test]
    fn same_spec_same_bytes() {
        let a = dataset_bytes(&gen_synthetic(&spec(50, 3)).unwrap());
        let b = dataset_bytes(&gen_synthetic(&spec(50, 3)).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_class_means_match_spec() {
        let s = SyntheticSpec {
            n: 10_000,
            dim: 4,
            classes: 4,
            separation: 3.0,
            noise: 1.0,
            seed: 12,
        };
        let ds = gen_synthetic(&s).unwrap();
        let means = s.class_means();
        let per = (s.n / s.classes) as f64;
        let tol = 3.0 * s.noise / per.sqrt();
        for c in 0..s.classes {
            for j in 0..s.dim {
                let (sum, cnt) = ds
                    .labels()
                    .unwrap()
                    .iter()
                    .enumerate()
                    .filter(|(_, &y)| y == c)
                    .fold((0.0, 0.0), |(s, k), (i, _)| (s + ds.features().row(i)[j], k + 1.0));
                assert!((sum / cnt - means.row(c)[j]).abs() <= tol);
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let ds = gen_synthetic(&spec(7, 3)).unwrap();
        let back = parse_dataset(&dataset_bytes(&ds), Path::new("mem")).unwrap();
        assert_eq!(back, ds);
        let unl = ds.unlabeled();
        let bytes = dataset_bytes(&unl);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 0);
        assert_eq!(parse_dataset(&bytes, Path::new("mem")).unwrap(), unl);
        assert!(parse_dataset(&bytes[..bytes.len() - 2], Path::new("mem")).is_err());
    }

    #[test]
    fn labels_validated() {
        let t = Tensor::zeros(&[2, 1]);
        assert!(matches!(
            Dataset::new(t, Some(vec![0, 3]), 3),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let (tr, va) = split_validation(100, 0.05, 1).unwrap();
        assert_eq!(va.len(), 5);
        let mut all: Vec<_> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_validation(100, 0.05, 1).unwrap(), (tr, va));
    }

    #[test]
    fn partition_covers_disjointly() {
        let p = MinibatchPartition::new(70, 8, 3).unwrap();
        assert_eq!(p.num_batches(), 9);
        assert_eq!(p.batch(8).len(), 6);
        let mut all: Vec<_> = p.batches().concat();
        all.sort_unstable();
        assert_eq!(all, (0..70).collect::<Vec<_>>());
        assert_eq!(p.fingerprint(), MinibatchPartition::new(70, 8, 3).unwrap().fingerprint());
        assert_ne!(p.fingerprint(), MinibatchPartition::new(70, 8, 4).unwrap().fingerprint());
    }
}
