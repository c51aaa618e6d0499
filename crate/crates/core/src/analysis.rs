//! Coreset diagnostics and a linear probe on frozen embeddings.

use crate::autodiff::Tensor;
use crate::data::{split_validation, Dataset, MinibatchPartition};
use crate::divergence::exact_sum;
use crate::error::{Error, Result};
use crate::model::{Branch, Model};
use crate::par;
use crate::rng::{self, tags};
use crate::selection::CoresetResult;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_points(a: &Tensor, name: &'static str) -> Result<()> {
    if a.rank() != 2 || a.numel() == 0 {
        return Err(Error::EmptySet(name));
    }
    Ok(())
}

/// Median Euclidean distance over all unordered pairs of distinct rows of
/// `A ∪ B`. Falls back to 1 when every pair coincides.
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_points(a, "first point set")?;
    check_points(b, "second point set")?;
    let rows: Vec<&[f64]> = (0..a.rows()).map(|i| a.row(i)).chain((0..b.rows()).map(|i| b.row(i))).collect();
    let n = rows.len();
    let mut d: Vec<f64> = par::map_indexed(n, |i| (i + 1..n).map(|j| sq_dist(rows[i], rows[j]).sqrt()).collect::<Vec<_>>())
        .into_iter()
        .flatten()
        .collect();
    if d.is_empty() {
        return Ok(1.0);
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    Ok(if med > 0.0 { med } else { 1.0 })
}

fn kernel_mean(a: &Tensor, b: &Tensor, h: f64) -> f64 {
    let terms: Vec<f64> = par::map_indexed(a.rows(), |i| {
        (0..b.rows()).map(|j| (-sq_dist(a.row(i), b.row(j)) / (2.0 * h * h)).exp()).collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    exact_sum(&terms) / terms.len() as f64
}

/// Biased RBF-kernel estimate of `MMD²(A, B)`, floored at 0.
///
/// `bandwidth = None` uses [`median_bandwidth`]. Kernel means are summed
/// with correct rounding, so the result does not depend on argument order.
pub fn mmd(a: &Tensor, b: &Tensor, bandwidth: Option<f64>) -> Result<f64> {
    check_points(a, "first point set")?;
    check_points(b, "second point set")?;
    if a.cols() != b.cols() {
        return Err(Error::Config(format!(
            "point sets have dimensions {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::Config(format!("bandwidth must be positive, got {h}"))),
        None => median_bandwidth(a, b)?,
    };
    let v = (kernel_mean(a, a, h) + kernel_mean(b, b, h)) - 2.0 * kernel_mean(a, b, h);
    Ok(v.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Imbalance {
    /// Largest over smallest class count; infinite when a class is missing.
    pub ratio: f64,
    pub missing_classes: Vec<usize>,
    pub counts: Vec<usize>,
}

pub fn imbalance_ratio(labels: &[usize], classes: usize) -> Result<Imbalance> {
    if classes == 0 {
        return Err(Error::Config("imbalance needs at least one class".into()));
    }
    let mut counts = vec![0usize; classes];
    for &y in labels {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        counts[y] += 1;
    }
    let missing: Vec<usize> = (0..classes).filter(|&c| counts[c] == 0).collect();
    let max = *counts.iter().max().expect("at least one class");
    let ratio = if !missing.is_empty() {
        f64::INFINITY
    } else {
        max as f64 / *counts.iter().min().expect("at least one class") as f64
    };
    Ok(Imbalance {
        ratio,
        missing_classes: missing,
        counts,
    })
}

/// Points covered by a coreset, in ascending order.
pub fn coreset_points(result: &CoresetResult, partition: &MinibatchPartition) -> Result<Vec<usize>> {
    check_partition(result, partition)?;
    let mut pts: Vec<usize> = result.selected.iter().flat_map(|&b| partition.batch(b).iter().copied()).collect();
    pts.sort_unstable();
    Ok(pts)
}

fn check_partition(result: &CoresetResult, partition: &MinibatchPartition) -> Result<()> {
    if result.partition_fingerprint != partition.fingerprint() || result.num_batches != partition.num_batches() {
        return Err(Error::PartitionMismatch);
    }
    Ok(())
}

/// How many of the rounds selected each point.
pub fn selection_frequency(results: &[CoresetResult], partition: &MinibatchPartition) -> Result<Vec<usize>> {
    let mut counts = vec![0; partition.num_points()];
    for r in results {
        check_partition(r, partition)?;
        for &b in &r.selected {
            for &i in partition.batch(b) {
                counts[i] += 1;
            }
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub test_fraction: f64,
    pub lr: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.3,
            lr: 0.5,
            max_iters: 500,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub iterations: usize,
    pub final_loss: f64,
}

/// Softmax regression on standardized features `x` by full-batch gradient
/// descent, evaluated on a seeded held-out split.
pub fn probe_features(x: &Tensor, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<ProbeReport> {
    check_points(x, "probe set")?;
    if labels.len() != x.rows() {
        return Err(Error::Config("label count differs from point count".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label: y, classes });
    }
    let distinct = |ids: &[usize]| {
        let mut seen = vec![false; classes];
        ids.iter().for_each(|&i| seen[labels[i]] = true);
        seen.iter().filter(|&&s| s).count()
    };
    let all: Vec<usize> = (0..labels.len()).collect();
    if distinct(&all) < 2 {
        return Err(Error::DegenerateLabels);
    }
    let (train, test) = split_validation(x.rows(), cfg.test_fraction, rng::derive_seed(cfg.seed, tags::PROBE, 0))?;
    if distinct(&train) < 2 {
        return Err(Error::DegenerateLabels);
    }
    let d = x.cols();
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in &train {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for &i in &train {
        for ((s, v), m) in sd.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let feat = |i: usize| -> Vec<f64> { x.row(i).iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect() };
    let xs: Vec<Vec<f64>> = (0..x.rows()).map(feat).collect();

    // Weights are `[d + 1, classes]` with the bias in the last row.
    let mut w = vec![0.0; (d + 1) * classes];
    let probs = |w: &[f64], f: &[f64]| -> Vec<f64> {
        let mut z: Vec<f64> = (0..classes)
            .map(|c| w[d * classes + c] + f.iter().enumerate().map(|(j, v)| v * w[j * classes + c]).sum::<f64>())
            .collect();
        let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = z.iter_mut().map(|v| {
            *v = (*v - mx).exp();
            *v
        }).sum();
        z.iter().map(|v| v / s).collect()
    };
    let mut prev = f64::INFINITY;
    let mut loss = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..cfg.max_iters {
        let mut grad = vec![0.0; w.len()];
        let mut total = 0.0;
        for &i in &train {
            let p = probs(&w, &xs[i]);
            total -= p[labels[i]].max(1e-300).ln();
            for c in 0..classes {
                let r = (p[c] - f64::from(u8::from(c == labels[i]))) / n;
                for (j, v) in xs[i].iter().enumerate() {
                    grad[j * classes + c] += r * v;
                }
                grad[d * classes + c] += r;
            }
        }
        loss = total / n;
        iterations = it + 1;
        if (prev - loss).abs() < cfg.tolerance {
            break;
        }
        prev = loss;
        for (wv, g) in w.iter_mut().zip(&grad) {
            *wv -= cfg.lr * g;
        }
    }
    let accuracy = |ids: &[usize]| -> f64 {
        if ids.is_empty() {
            return f64::NAN;
        }
        let hits = ids
            .iter()
            .filter(|&&i| {
                let p = probs(&w, &xs[i]);
                let best = (0..classes).fold(0, |b, c| if p[c] > p[b] { c } else { b });
                best == labels[i]
            })
            .count();
        hits as f64 / ids.len() as f64
    };
    Ok(ProbeReport {
        train_accuracy: accuracy(&train),
        test_accuracy: accuracy(&test),
        iterations,
        final_loss: loss,
    })
}

/// [`probe_features`] on the frozen natural-branch embeddings `f(x)`.
pub fn linear_probe(model: &Model, data: &Dataset, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let labels = data.labels().ok_or_else(|| Error::Config("linear probe needs labels".into()))?;
    let z = model.embed_values(data.features(), Branch::Natural)?;
    probe_features(&z, labels, data.classes(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::selection::random_select;
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, StandardNormal};

    fn cloud(n: usize, d: usize, shift: f64, seed: u64) -> Tensor {
        let mut r = rng::rng(seed);
        let v = (0..n * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                shift + z
            })
            .collect();
        Tensor::matrix(n, d, v).unwrap()
    }

    #[test]
    fn mmd_of_a_set_with_itself_is_zero() {
        let a = cloud(20, 3, 0.0, 1);
        assert!(mmd(&a, &a, None).unwrap() <= 1e-12);
    }

    #[test]
    fn singleton_formula() {
        let a = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let b = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        let h = 2.0;
        let expected = 2.0 - 2.0 * (-25.0f64 / (2.0 * h * h)).exp();
        assert!((mmd(&a, &b, Some(h)).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn mmd_is_symmetric_exactly() {
        for s in 0..5 {
            let a = cloud(13, 4, 0.0, s);
            let b = cloud(7, 4, 0.5, s + 100);
            assert_eq!(mmd(&a, &b, None).unwrap(), mmd(&b, &a, None).unwrap());
        }
    }

    #[test]
    fn separated_clouds_score_higher() {
        let wins = (0..20)
            .filter(|&s| {
                let near = mmd(&cloud(30, 2, 0.0, 3 * s), &cloud(30, 2, 0.0, 3 * s + 1), None).unwrap();
                let far = mmd(&cloud(30, 2, 0.0, 3 * s), &cloud(30, 2, 3.0, 3 * s + 2), None).unwrap();
                far > near
            })
            .count();
        assert_eq!(wins, 20);
    }

    #[test]
    fn mmd_errors() {
        let a = cloud(3, 2, 0.0, 0);
        assert!(mmd(&a, &Tensor::zeros(&[0, 2]), None).is_err());
        assert!(mmd(&a, &cloud(3, 3, 0.0, 0), None).is_err());
        assert!(mmd(&a, &a, Some(0.0)).is_err());
    }

    #[test]
    fn imbalance_cases() {
        assert_eq!(imbalance_ratio(&[0, 1, 0, 1], 2).unwrap().ratio, 1.0);
        let six_three: Vec<usize> = [vec![0; 6], vec![1; 3]].concat();
        assert_eq!(imbalance_ratio(&six_three, 2).unwrap().ratio, 2.0);
        let missing = imbalance_ratio(&[0, 0, 2], 3).unwrap();
        assert!(missing.ratio.is_infinite());
        assert_eq!(missing.missing_classes, vec![1]);
    }

    #[test]
    fn random_coresets_are_roughly_balanced() {
        // 64 points, two balanced classes, batches of 4, k = 0.5.
        let labels: Vec<usize> = (0..64).map(|i| i % 2).collect();
        let mut ratios: Vec<f64> = (0..100)
            .map(|s| {
                let p = MinibatchPartition::new(64, 4, s).unwrap();
                let r = random_select(16, 64, 4, 0.5, s, p.fingerprint()).unwrap();
                let pts = coreset_points(&r, &p).unwrap();
                let y: Vec<usize> = pts.iter().map(|&i| labels[i]).collect();
                imbalance_ratio(&y, 2).unwrap().ratio
            })
            .collect();
        ratios.sort_by(f64::total_cmp);
        assert!(ratios[50] < 1.5, "median {}", ratios[50]);
    }

    #[test]
    fn frequency_accounting() {
        let p = MinibatchPartition::new(40, 8, 3).unwrap();
        let one = random_select(5, 40, 8, 0.4, 1, p.fingerprint()).unwrap();
        let f = selection_frequency(std::slice::from_ref(&one), &p).unwrap();
        assert!(f.iter().all(|&c| c <= 1));
        let rounds: Vec<CoresetResult> =
            (0..6).map(|s| random_select(5, 40, 8, 0.4, s, p.fingerprint()).unwrap()).collect();
        let f = selection_frequency(&rounds, &p).unwrap();
        assert_eq!(f.iter().sum::<usize>(), 6 * 2 * 8);
        let mut always = rounds.clone();
        for r in &mut always {
            r.selected = vec![0, 1];
        }
        let f = selection_frequency(&always, &p).unwrap();
        assert!(p.batch(0).iter().all(|&i| f[i] == 6));
        let other = MinibatchPartition::new(40, 8, 4).unwrap();
        assert!(matches!(selection_frequency(&rounds, &other), Err(Error::PartitionMismatch)));
    }

    #[test]
    fn probe_separable_and_shuffled() {
        let ds = gen_synthetic(&SyntheticSpec {
            n: 400,
            dim: 3,
            classes: 2,
            separation: 20.0,
            noise: 1.0,
            seed: 1,
        })
        .unwrap();
        let y = ds.labels().unwrap();
        let r = probe_features(ds.features(), y, 2, &ProbeConfig::default()).unwrap();
        assert_eq!((r.train_accuracy, r.test_accuracy), (1.0, 1.0));

        let mut r2 = rng::rng(9);
        let big = cloud(4000, 3, 0.0, 2);
        let mut shuffled: Vec<usize> = (0..4000).map(|i| i % 2).collect();
        shuffled.shuffle(&mut r2);
        let rep = probe_features(&big, &shuffled, 2, &ProbeConfig::default()).unwrap();
        assert!((rep.test_accuracy - 0.5).abs() <= 0.05, "{}", rep.test_accuracy);
    }

    #[test]
    fn probe_rejects_single_class() {
        let x = cloud(10, 2, 0.0, 0);
        assert!(matches!(
            probe_features(&x, &[1; 10], 2, &ProbeConfig::default()),
            Err(Error::DegenerateLabels)
        ));
    }
}
