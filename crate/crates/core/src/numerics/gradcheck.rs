//! Central finite differences, the reference every analytic backward pass
//! in this crate is checked against.

use crate::error::{Error, Result};
use crate::numerics::ValueGrid;

/// Denominator floor for [`relative_error`]: below this magnitude both
/// derivatives are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Step used by the gradient-check suites.
pub const DEFAULT_EPS: f64 = 1e-5;

/// `(f(x + εeᵢⱼ) − f(x − εeᵢⱼ)) / 2ε` for every entry of `x`.
pub fn finite_diff_grad<F>(f: F, x: &ValueGrid, eps: f64) -> Result<ValueGrid>
where
    F: Fn(&ValueGrid) -> f64,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut probe = x.clone();
    let mut grad = ValueGrid::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + eps;
            let up = f(&probe);
            probe[(i, j)] = orig - eps;
            let down = f(&probe);
            probe[(i, j)] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite {
                    what: "finite-difference objective".into(),
                    row: i,
                    col: j,
                });
            }
            grad[(i, j)] = (up - down) / (2.0 * eps);
        }
    }
    Ok(grad)
}

/// Derivative at 0 of a scalar function of a single perturbation.
pub fn central_difference<F>(mut g: F, eps: f64) -> f64
where
    F: FnMut(f64) -> f64,
{
    (g(eps) - g(-eps)) / (2.0 * eps)
}

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Largest [`relative_error`] over paired grids.
pub fn max_relative_error(analytic: &ValueGrid, numeric: &ValueGrid) -> Result<f64> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::shape(
            "gradient check",
            format!("{:?}", analytic.shape()),
            format!("{:?}", numeric.shape()),
        ));
    }
    Ok(analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = ValueGrid::from_rows(&[[1.0, 2.0]]).unwrap();
        let g = finite_diff_grad(|x| x.sum_squares(), &x, 1e-5).unwrap();
        assert!((g[(0, 0)] - 2.0).abs() < 1e-9);
        assert!((g[(0, 1)] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = ValueGrid::filled(2, 3, 0.7);
        let g = finite_diff_grad(|_| 3.25, &x, 1e-5).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_objective_names_entry() {
        let x = ValueGrid::from_rows(&[[1.0, 0.0]]).unwrap();
        let f = |x: &ValueGrid| if x[(0, 1)] < 0.0 { f64::NAN } else { x.sum() };
        let err = finite_diff_grad(f, &x, 1e-5);
        assert!(matches!(err, Err(Error::NonFinite { row: 0, col: 1, .. })));
    }

    #[test]
    fn step_range_enforced() {
        let x = ValueGrid::zeros(1, 1);
        assert!(finite_diff_grad(|x| x.sum(), &x, 1e-2).is_err());
        assert!(finite_diff_grad(|x| x.sum(), &x, 1e-9).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }
}
