//! Counting reference for the split-conformal threshold and a synthetic
//! score generator.

use rand::Rng;

/// Smallest calibration score `s` such that at least
/// `ceil((n + 1)(1 - alpha))` scores are `<= s`, or `+inf` if none is.
pub fn reference_q_hat(scores: &[f64], alpha: f64) -> f64 {
    let n = scores.len();
    let need = ((n as f64 + 1.0) * (1.0 - alpha) - 1e-9).ceil() as usize;
    if need == 0 {
        return f64::NEG_INFINITY;
    }
    let mut best = f64::INFINITY;
    for &s in scores {
        let at_most = scores.iter().filter(|&&x| x <= s).count();
        if at_most >= need && s < best {
            best = s;
        }
    }
    best
}

/// Nonconformity scores `1 - confidence` of correct extractions, with
/// confidence skewed towards 1.
pub fn correct_scores<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            let conf = 1.0 - 0.6 * u * u;
            1.0 - conf
        })
        .collect()
}

/// Mean fraction of held-out correct scores that pass, over `trials` fresh
/// calibration/test draws.
pub fn empirical_coverage<R: Rng>(
    rng: &mut R,
    alpha: f64,
    n_cal: usize,
    n_test: usize,
    trials: usize,
    fit: impl Fn(&[f64], f64) -> f64,
) -> f64 {
    let mut total = 0.0;
    for _ in 0..trials {
        let cal = correct_scores(rng, n_cal);
        let test = correct_scores(rng, n_test);
        let q = fit(&cal, alpha);
        total += test.iter().filter(|&&s| s <= q).count() as f64 / n_test as f64;
    }
    total / trials as f64
}
