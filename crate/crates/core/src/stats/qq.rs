use crate::{Error, Result};

use super::sorted_finite;

/// Sample quantile with Hazen positions: `p` maps to 1-based position
/// `n p + 1/2`, so `p = (i - 1/2)/n` lands exactly on order statistic `i`.
pub fn hazen_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = (n as f64 * p + 0.5).clamp(1.0, n as f64);
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let hi = (lo + 1).min(n);
    sorted[lo - 1] + frac * (sorted[hi - 1] - sorted[lo - 1])
}

/// `(reference quantile, sample quantile)` at positions `(i - 0.5)/k`.
pub fn qq_points<F: Fn(f64) -> f64>(samples: &[f64], reference_quantile: F, k: usize) -> Result<Vec<(f64, f64)>> {
    if k == 0 || k > samples.len() {
        return Err(Error::Domain(format!("k = {k} must be in 1..={}", samples.len())));
    }
    let sorted = sorted_finite(samples)?;
    Ok((1..=k)
        .map(|i| {
            let p = (i as f64 - 0.5) / k as f64;
            (reference_quantile(p), hazen_quantile(&sorted, p))
        })
        .collect())
}

/// CSV with header `theoretical,empirical`.
pub fn qq_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("theoretical,empirical\n");
    for (t, e) in points {
        s.push_str(&format!("{t:e},{e:e}\n"));
    }
    s
}
