//! Central finite-difference gradient checking.
//!
//! Always run in `f64`: finite differences lose too many digits in single
//! precision to certify anything at the tolerances used here.

use super::Tensor;
use crate::error::{Error, Result};

fn relative_error(a: f64, b: f64, scale_floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(scale_floor)
}

/// Compares the analytic gradient of a scalar function against central
/// finite differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` at every
/// coordinate of `point`, returning the maximum relative error.
pub fn grad_check(
    f: &mut dyn FnMut(&Tensor<f64>) -> Result<f64>,
    analytic: &Tensor<f64>,
    point: &Tensor<f64>,
    eps: f64,
) -> Result<f64> {
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_at(f, analytic, point, eps, 1e-8, &coords)
}

/// Like [`grad_check`] but coordinates whose gradient magnitude falls below
/// `scale` are measured against `scale` instead of their own magnitude.
///
/// Deep compositions attenuate early-layer gradients to the point where the
/// exact value can sit below the cancellation noise of the loss evaluation
/// itself (roundoff of roughly `1e-13 / (2 * eps)` here). A purely relative
/// comparison then reports noise, not correctness. With `scale = s` and a
/// tolerance `t`, an assertion `err < t` is equivalent to the mixed bound
/// `|analytic - numeric| < max(t * |analytic|, t * |numeric|, t * s)`.
pub fn grad_check_scaled(
    f: &mut dyn FnMut(&Tensor<f64>) -> Result<f64>,
    analytic: &Tensor<f64>,
    point: &Tensor<f64>,
    eps: f64,
    scale: f64,
) -> Result<f64> {
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_at(f, analytic, point, eps, scale, &coords)
}

/// Like [`grad_check`] but probing only `max_coords` evenly spread
/// coordinates. For large tensors an exhaustive sweep is quadratic in model
/// size; a spread sample still catches indexing and formula errors.
pub fn grad_check_sampled(
    f: &mut dyn FnMut(&Tensor<f64>) -> Result<f64>,
    analytic: &Tensor<f64>,
    point: &Tensor<f64>,
    eps: f64,
    max_coords: usize,
) -> Result<f64> {
    let n = point.len();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        // Even stride with a prime-ish offset so samples do not all fall on
        // one structural slice of the tensor.
        (0..max_coords)
            .map(|i| (i * n / max_coords + i * 7919) % n)
            .collect()
    };
    grad_check_at(f, analytic, point, eps, 1e-8, &coords)
}

fn grad_check_at(
    f: &mut dyn FnMut(&Tensor<f64>) -> Result<f64>,
    analytic: &Tensor<f64>,
    point: &Tensor<f64>,
    eps: f64,
    scale_floor: f64,
    coords: &[usize],
) -> Result<f64> {
    if analytic.shape() != point.shape() {
        return Err(Error::Dimension(format!(
            "analytic gradient shape {:?} does not match point shape {:?}",
            analytic.shape(),
            point.shape()
        )));
    }
    if !point.all_finite() {
        return Err(Error::Numeric("grad_check point is not finite".into()));
    }
    let mut max_err = 0.0f64;
    let mut probe = point.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function value at coordinate {i}: f+={plus}, f-={minus}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(numeric, analytic.data()[i], scale_floor);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_gradient_is_exact() {
        let point = Tensor::new(&[4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let analytic = Tensor::filled(&[4], 1.0);
        let err = grad_check(&mut |x| Ok(x.sum()), &analytic, &point, 1e-5).unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn quadratic_at_zero_has_zero_gradient() {
        let point = Tensor::zeros(&[5]);
        let analytic = Tensor::zeros(&[5]);
        let err = grad_check(&mut |x| Ok(x.squared_norm()), &analytic, &point, 1e-5).unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let point = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let wrong = Tensor::filled(&[3], 0.5);
        let err = grad_check(&mut |x| Ok(x.sum()), &wrong, &point, 1e-5).unwrap();
        assert!(err > 0.3);
    }

    #[test]
    fn non_finite_function_value_is_an_error() {
        let point = Tensor::zeros(&[1]);
        let analytic = Tensor::zeros(&[1]);
        let err = grad_check(&mut |_| Ok(f64::NAN), &analytic, &point, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn sampled_check_covers_small_tensors_fully() {
        let point = Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let analytic = Tensor::filled(&[4], 1.0);
        let err = grad_check_sampled(&mut |x| Ok(x.sum()), &analytic, &point, 1e-5, 100).unwrap();
        assert!(err < 1e-9);
    }
}
