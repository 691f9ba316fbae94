use crate::error::{Error, Result};
use crate::numerics::{dot, norm, ValueGrid};

/// Guard added to the norm product in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;

/// Pairwise cosine distance `1 − ⟨xᵢ, yⱼ⟩ / (‖xᵢ‖‖yⱼ‖ + ε)`, shape `n × m`.
pub fn cosine_cost(x: &ValueGrid, y: &ValueGrid) -> Result<ValueGrid> {
    if x.cols() != y.cols() {
        return Err(Error::shape("cosine_cost feature width", x.cols(), y.cols()));
    }
    let xn: Vec<f64> = x.rows_iter().map(norm).collect();
    let yn: Vec<f64> = y.rows_iter().map(norm).collect();
    Ok(ValueGrid::from_fn(x.rows(), y.rows(), |i, j| {
        1.0 - dot(x.row(i), y.row(j)) / (xn[i] * yn[j] + COSINE_EPS)
    }))
}

/// Gradients of `Σᵢⱼ d_cost[i,j] · cost[i,j]` with respect to `x` and `y`.
pub fn cosine_cost_backward(x: &ValueGrid, y: &ValueGrid, d_cost: &ValueGrid) -> Result<(ValueGrid, ValueGrid)> {
    if x.cols() != y.cols() {
        return Err(Error::shape("cosine_cost feature width", x.cols(), y.cols()));
    }
    if d_cost.shape() != (x.rows(), y.rows()) {
        return Err(Error::shape(
            "cosine_cost upstream gradient",
            format!("{:?}", (x.rows(), y.rows())),
            format!("{:?}", d_cost.shape()),
        ));
    }
    let d = x.cols();
    let xn: Vec<f64> = x.rows_iter().map(norm).collect();
    let yn: Vec<f64> = y.rows_iter().map(norm).collect();
    let mut dx = ValueGrid::zeros(x.rows(), d);
    let mut dy = ValueGrid::zeros(y.rows(), d);
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            let g = d_cost[(i, j)];
            if g == 0.0 {
                continue;
            }
            let xi = x.row(i);
            let yj = y.row(j);
            let den = xn[i] * yn[j] + COSINE_EPS;
            let c = dot(xi, yj) / den;
            // cost = 1 - c; ∂c/∂xᵢ = yⱼ/den − c·‖yⱼ‖·xᵢ/(‖xᵢ‖·den)
            let ax = if xn[i] > 0.0 { c * yn[j] / (xn[i] * den) } else { 0.0 };
            let ay = if yn[j] > 0.0 { c * xn[i] / (yn[j] * den) } else { 0.0 };
            for k in 0..d {
                dx[(i, k)] -= g * (yj[k] / den - ax * xi[k]);
                dy[(j, k)] -= g * (xi[k] / den - ay * yj[k]);
            }
        }
    }
    Ok((dx, dy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error, Rng};

    #[test]
    fn orthonormal_rows() {
        let x = ValueGrid::identity(3);
        let c = cosine_cost(&x, &x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 1.0 };
                assert!((c[(i, j)] - want).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn antipodal_is_two() {
        let x = ValueGrid::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
        let c = cosine_cost(&x, &x.scaled(-1.0)).unwrap();
        assert!((c[(0, 0)] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn matches_per_pair_scalar_computation() {
        let mut rng = Rng::new(21);
        let x = rng.normal_grid(5, 3, 1.0);
        let y = rng.normal_grid(4, 3, 1.0);
        let c = cosine_cost(&x, &y).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let (a, b) = (x.row(i), y.row(j));
                let num = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
                let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
                let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
                let want = 1.0 - num / (na * nb + 1e-8);
                assert!((c[(i, j)] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn width_mismatch() {
        assert!(cosine_cost(&ValueGrid::zeros(2, 3), &ValueGrid::zeros(2, 4)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(4);
        let x = rng.normal_grid(4, 3, 1.0);
        let y = rng.normal_grid(5, 3, 1.0);
        let w = rng.normal_grid(4, 5, 1.0);
        let f = |x: &ValueGrid, y: &ValueGrid| -> f64 {
            let c = cosine_cost(x, y).unwrap();
            c.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
        };
        let (dx, dy) = cosine_cost_backward(&x, &y, &w).unwrap();
        let nx = finite_diff_grad(|x| f(x, &y), &x, 1e-6).unwrap();
        let ny = finite_diff_grad(|y| f(&x, y), &y, 1e-6).unwrap();
        assert!(max_relative_error(&dx, &nx).unwrap() < 1e-6);
        assert!(max_relative_error(&dy, &ny).unwrap() < 1e-6);
    }
}
