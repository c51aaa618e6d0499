use super::{Tensor, TensorError};

/// Central-difference gradient estimate of a scalar function.
///
/// Coordinate `i` is `(f(x + h e_i) - f(x - h e_i)) / 2h`. Used as the
/// independent oracle for every reverse-mode gradient in the test suites.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor, TensorError>
where
    F: Fn(&Tensor) -> Result<f64, TensorError>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(TensorError::Domain {
            op: "finite_difference_gradient",
            detail: format!("step must be positive, got {h}"),
        });
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(TensorError::NonFiniteProbe { coordinate: i });
        }
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Norm-relative error `|a - b| / max(|a|, |b|, floor)` between two gradients.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
