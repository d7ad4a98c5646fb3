//! Scalar-generic order statistics used by outlier detection and conformal
//! calibration.

use num_traits::Float;

/// Consistency constant relating the MAD to the standard deviation of a
/// normal distribution.
pub const MAD_CONSISTENCY: f64 = 0.6745;

/// Fallback scale (sqrt(pi/2)) applied to the mean absolute deviation when
/// the MAD is zero.
pub const MEAN_AD_SCALE: f64 = 1.253314;

fn lit<F: Float>(x: f64) -> F {
    F::from(x).expect("literal representable in scalar type")
}

/// Median of `values`; `None` when empty or when any value is NaN.
pub fn median<F: Float>(values: &[F]) -> Option<F> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 0 {
        (sorted[mid - 1] + sorted[mid]) / lit(2.0)
    } else {
        sorted[mid]
    })
}

/// Median absolute deviation around the median.
pub fn mad<F: Float>(values: &[F]) -> Option<F> {
    let m = median(values)?;
    let deviations: Vec<F> = values.iter().map(|v| (*v - m).abs()).collect();
    median(&deviations)
}

/// Modified z-scores `0.6745 (x - median) / MAD`.
///
/// When the MAD is zero the scale falls back to `1.253314 * mean|x - median|`;
/// when that is also zero every score is zero.
pub fn robust_z_scores<F: Float>(values: &[F]) -> Option<Vec<F>> {
    let m = median(values)?;
    let spread = mad(values)?;
    let scale = if spread > F::zero() {
        spread / lit(MAD_CONSISTENCY)
    } else {
        let n = F::from(values.len()).expect("length representable");
        let mean_ad = values.iter().fold(F::zero(), |acc, v| acc + (*v - m).abs()) / n;
        mean_ad * lit(MEAN_AD_SCALE)
    };
    if scale <= F::zero() {
        return Some(vec![F::zero(); values.len()]);
    }
    Some(values.iter().map(|v| (*v - m) / scale).collect())
}

/// 1-based rank `ceil((n + 1)(1 - alpha))` of the split-conformal quantile.
///
/// The product is computed in `f64` and nudged down by a small tolerance so
/// that exact products such as `10 * 0.9` do not round up past an integer.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    (x - 1e-9).ceil().max(0.0) as usize
}

/// The `k`-th smallest score (1-based) of `sorted`, or `+inf` when `k > n`.
pub fn kth_smallest<F: Float>(sorted: &[F], k: usize) -> F {
    if k == 0 {
        return F::neg_infinity();
    }
    sorted.get(k - 1).copied().unwrap_or_else(F::infinity)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0f32, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median::<f64>(&[]), None);
        assert_eq!(median(&[1.0, f64::NAN]), None);
    }

    #[test]
    fn age_outlier_scores() {
        let ages = [30.0, 31.0, 29.0, 33.0, 28.0, 32.0, 30.0, 180.0];
        assert_eq!(median(&ages), Some(30.5));
        assert_eq!(mad(&ages), Some(1.5));
        let z = robust_z_scores(&ages).unwrap();
        // 0.6745 * 149.5 / 1.5
        assert!((z[7] - 67.225_166_666).abs() < 1e-6);
        assert_eq!(z.iter().filter(|s| s.abs() > 3.5).count(), 1);
    }

    #[test]
    fn zero_mad_falls_back() {
        let v = [5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 90.0];
        let z = robust_z_scores(&v).unwrap();
        // mean |x - 5| = 85/8, scale = 1.253314 * 10.625
        assert!((z[7] - 85.0 / (1.253314 * 10.625)).abs() < 1e-9);
        assert_eq!(z[0], 0.0);
        assert_eq!(robust_z_scores(&[2.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn ranks() {
        assert_eq!(conformal_rank(4, 0.25), 4);
        assert_eq!(conformal_rank(1, 0.5), 1);
        assert_eq!(conformal_rank(9, 0.1), 9);
        assert_eq!(conformal_rank(3, 0.1), 4);
        assert!(kth_smallest(&[0.1, 0.2], 3).is_infinite());
        assert_eq!(kth_smallest(&[0.1f32, 0.2], 2), 0.2);
    }
}
