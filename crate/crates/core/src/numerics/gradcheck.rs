//! Central finite differences, the reference every analytic gradient is checked against.

use super::param::ParamTensor;
use crate::error::{Error, Result};

/// Estimates `∂f/∂p_i ≈ (f(p + εe_i) − f(p − εe_i)) / 2ε` for every element of `p`.
pub fn finite_difference_gradient<F>(mut f: F, p: &ParamTensor, step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&ParamTensor) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let mut probe = p.clone();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let original = probe.values()[i];
        probe.values_mut()[i] = original + step;
        let plus = f(&probe);
        probe.values_mut()[i] = original - step;
        let minus = f(&probe);
        probe.values_mut()[i] = original;
        for value in [plus, minus] {
            if !value.is_finite() {
                return Err(Error::NonFiniteAtIndex { index: i, value });
            }
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Same as [`finite_difference_gradient`] over a plain slice.
pub fn finite_difference_slice<F>(mut f: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let p = ParamTensor::new("probe", vec![point.len()], point.to_vec())?;
    finite_difference_gradient(|t| f(t.values()), &p, step)
}

/// Largest elementwise deviation scaled by the larger infinity norm of the two
/// gradients: `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`. Two all-zero gradients compare as 0.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let p = ParamTensor::new("p", vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_difference_gradient(|t| t.values().iter().map(|v| v * v).sum(), &p, 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = ParamTensor::new("p", vec![3], vec![0.1, -4.0, 7.0]).unwrap();
        let g = finite_difference_gradient(|_| 3.5, &p, 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn non_finite_reports_index() {
        let p = ParamTensor::new("p", vec![3], vec![1.0, 1.0, 2.0]).unwrap();
        let err = finite_difference_gradient(|t| (t.values()[1] - 0.9995).ln(), &p, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFiniteAtIndex { index: 1, .. }));
    }

    #[test]
    fn rejects_nonpositive_step() {
        let p = ParamTensor::new("p", vec![1], vec![1.0]).unwrap();
        assert!(finite_difference_gradient(|_| 0.0, &p, 0.0).is_err());
    }

    #[test]
    fn relative_error_scales_by_norm() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-15);
    }
}
