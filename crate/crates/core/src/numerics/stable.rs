//! Numerically stable softmax / softmin primitives.

use crate::error::{Error, Result};
use crate::numerics::ValueGrid;

/// Row-wise softmax of `x / temperature`, computed with max subtraction.
pub fn softmax_rows(x: &ValueGrid, temperature: f64) -> Result<ValueGrid> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let mut out = ValueGrid::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "softmax input".into(),
                row: i,
                col: j,
            });
        }
        softmax_into(row, temperature, out.row_mut(i));
    }
    Ok(out)
}

/// Softmax of `row / temperature` written into `out`. Inputs must be finite.
pub fn softmax_into(row: &[f64], temperature: f64, out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = ((v - max) / temperature).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `log Σ exp(xᵢ)` with max subtraction.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise `log softmax(x / temperature)`.
pub fn log_softmax_row(row: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
    let lse = log_sum_exp(&scaled);
    scaled.into_iter().map(|v| v - lse).collect()
}

/// Smoothed minimum `−γ log Σᵢ exp(−aᵢ/γ)`, computed with min subtraction.
///
/// Always `≤ min(a)` and `> min(a) − γ log n`; tends to `min(a)` as `γ → 0`.
pub fn softmin(values: &[f64], gamma: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("softmin of an empty list".into()));
    }
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("softmin gamma must be positive, got {gamma}")));
    }
    Ok(softmin_unchecked(values, gamma))
}

#[inline]
pub(crate) fn softmin_unchecked(values: &[f64], gamma: f64) -> f64 {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let total: f64 = values.iter().map(|a| (-(a - min) / gamma).exp()).sum();
    min - gamma * total.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_symmetric_row() {
        let p = softmax_rows(&ValueGrid::from_rows(&[[0.0, 0.0]]).unwrap(), 1.0).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_extreme_logits_do_not_overflow() {
        let p = softmax_rows(&ValueGrid::from_rows(&[[1000.0, 0.0]]).unwrap(), 1.0).unwrap();
        assert_eq!(p[(0, 0)], 1.0);
        assert_eq!(p[(0, 1)], 0.0);
    }

    #[test]
    fn softmax_with_temperature_matches_high_precision_reference() {
        // mpmath, 40 digits: softmax([0.5, 1.0, 1.5])
        let expected = [
            0.186_323_723_225_847_577_023_800_734_156_484_2,
            0.307_195_885_718_498_397_073_157_144_529_760_6,
            0.506_480_391_055_654_025_903_042_121_313_755_2,
        ];
        let p = softmax_rows(&ValueGrid::from_rows(&[[1.0, 2.0, 3.0]]).unwrap(), 2.0).unwrap();
        for (a, b) in p.row(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        let g = ValueGrid::from_rows(&[[0.0, 1.0], [f64::INFINITY, 0.0]]).unwrap();
        match softmax_rows(&g, 1.0) {
            Err(Error::NonFinite { row, .. }) => assert_eq!(row, 1),
            other => panic!("{other:?}"),
        }
        assert!(softmax_rows(&ValueGrid::zeros(1, 2), 0.0).is_err());
    }

    #[test]
    fn softmin_examples() {
        assert_eq!(softmin(&[5.0], 0.3).unwrap(), 5.0);
        assert!((softmin(&[0.0, 0.0], 1.0).unwrap() + std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softmin(&[1.0, 2.0, 4.0], 0.01).unwrap() - 1.0).abs() < 1e-6);
        assert!(softmin(&[], 1.0).is_err());
        assert!(softmin(&[1.0], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-1e4f64..1e4, 1..12), t in 0.05f64..10.0) {
            let p = softmax_rows(&ValueGrid::from_rows(&[row]).unwrap(), t).unwrap();
            prop_assert!((p.sum() - 1.0).abs() <= 1e-9);
            prop_assert!(p.as_slice().iter().all(|v| v.is_finite() && *v >= 0.0));
        }

        #[test]
        fn softmin_bounds_and_monotone(
            a in prop::collection::vec(-50f64..50.0, 1..8),
            gamma in 0.01f64..5.0,
            k in 0usize..8,
            bump in 0.0f64..3.0,
        ) {
            let n = a.len() as f64;
            let min = a.iter().copied().fold(f64::INFINITY, f64::min);
            let s = softmin(&a, gamma).unwrap();
            prop_assert!(s <= min + 1e-12);
            prop_assert!(s > min - gamma * n.ln() - 1e-12);
            let mut b = a.clone();
            let k = k % b.len();
            b[k] += bump;
            prop_assert!(softmin(&b, gamma).unwrap() >= s - 1e-12);
        }
    }
}
