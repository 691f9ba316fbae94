//! Soft-DTW forward recursion and its analytic reverse pass.
//!
//! `R` is `(S+1) × (T+1)` with `R[0][0] = 0` and the rest of the first row and
//! column at the [`BOUNDARY`] sentinel standing in for `+∞`;
//! `R[i][j] = C[i−1][j−1] + softmin_γ(R[i−1][j−1], R[i−1][j], R[i][j−1])`.
//! The reverse pass propagates path occupancies
//! `E[i][j] = Σ_succ E[succ] · exp((R[succ] − C[succ] − R[i][j]) / γ)` from
//! `E[S][T] = 1`; `E` is `∂s_γ/∂C`.

use crate::error::{Error, Result};
use crate::numerics::{softmin_unchecked, ValueGrid};

/// Stand-in for `+∞` on the boundary of `R`; vanishes inside softmin.
pub const BOUNDARY: f64 = 1e30;

#[derive(Debug, Clone, PartialEq)]
pub struct SoftDtwResult {
    /// `s_γ = R[S][T]`.
    pub score: f64,
    /// Accumulated cost including the boundary row and column.
    pub accumulated: ValueGrid,
    /// `∂s_γ/∂C`, the expected path occupancy of every cell.
    pub grad: ValueGrid,
}

pub fn soft_dtw(cost: &ValueGrid, gamma: f64) -> Result<SoftDtwResult> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("soft-DTW gamma must be positive, got {gamma}")));
    }
    let (s, t) = cost.shape();
    if s == 0 || t == 0 {
        return Err(Error::Empty("soft-DTW cost matrix".into()));
    }
    let mut r = ValueGrid::filled(s + 1, t + 1, BOUNDARY);
    r[(0, 0)] = 0.0;
    for i in 1..=s {
        for j in 1..=t {
            let prev = [r[(i - 1, j - 1)], r[(i - 1, j)], r[(i, j - 1)]];
            r[(i, j)] = cost[(i - 1, j - 1)] + softmin_unchecked(&prev, gamma);
        }
    }
    let mut e = ValueGrid::zeros(s + 1, t + 1);
    e[(s, t)] = 1.0;
    for i in (1..=s).rev() {
        for j in (1..=t).rev() {
            if i == s && j == t {
                continue;
            }
            let here = r[(i, j)];
            let mut acc = 0.0;
            for (si, sj) in [(i + 1, j), (i, j + 1), (i + 1, j + 1)] {
                if si > s || sj > t {
                    continue;
                }
                let w = ((r[(si, sj)] - cost[(si - 1, sj - 1)] - here) / gamma).exp();
                acc += e[(si, sj)] * w;
            }
            e[(i, j)] = acc;
        }
    }
    let grad = ValueGrid::from_fn(s, t, |i, j| e[(i + 1, j + 1)]);
    Ok(SoftDtwResult {
        score: r[(s, t)],
        accumulated: r,
        grad,
    })
}

/// Classic DTW with a hard minimum.
pub fn hard_dtw(cost: &ValueGrid) -> Result<f64> {
    let (s, t) = cost.shape();
    if s == 0 || t == 0 {
        return Err(Error::Empty("DTW cost matrix".into()));
    }
    let mut r = ValueGrid::filled(s + 1, t + 1, f64::INFINITY);
    r[(0, 0)] = 0.0;
    for i in 1..=s {
        for j in 1..=t {
            let best = r[(i - 1, j - 1)].min(r[(i - 1, j)]).min(r[(i, j - 1)]);
            r[(i, j)] = cost[(i - 1, j - 1)] + best;
        }
    }
    Ok(r[(s, t)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error, Rng};

    #[test]
    fn one_by_one() {
        let c = ValueGrid::from_rows(&[[0.37]]).unwrap();
        for gamma in [0.01, 1.0, 10.0] {
            let r = soft_dtw(&c, gamma).unwrap();
            assert_eq!(r.score, 0.37);
            assert_eq!(r.grad.as_slice(), &[1.0]);
        }
    }

    #[test]
    fn two_by_two_zero_costs() {
        // three monotone paths of cost 0 ⇒ −γ log 3
        let r = soft_dtw(&ValueGrid::zeros(2, 2), 0.5).unwrap();
        assert!((r.score + 0.5 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_gamma() {
        assert!(soft_dtw(&ValueGrid::zeros(2, 2), 0.0).is_err());
        assert!(soft_dtw(&ValueGrid::zeros(0, 2), 1.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(3);
        for gamma in [0.1, 1.0] {
            let c = rng.uniform_grid(4, 5, 0.0, 2.0);
            let r = soft_dtw(&c, gamma).unwrap();
            let n = finite_diff_grad(|c| soft_dtw(c, gamma).unwrap().score, &c, 1e-5).unwrap();
            let err = max_relative_error(&r.grad, &n).unwrap();
            assert!(err < 1e-4, "gamma {gamma}: {err}");
        }
    }

    #[test]
    fn small_gamma_approaches_hard_dtw() {
        let mut rng = Rng::new(5);
        let c = rng.uniform_grid(5, 5, 0.0, 2.0);
        let soft = soft_dtw(&c, 0.001).unwrap().score;
        let hard = hard_dtw(&c).unwrap();
        assert!(soft <= hard);
        assert!(hard - soft < 1e-3);
    }
}
