use rayon::prelude::*;
use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;

use super::{Family, FitParams, FitResult};
use crate::{Error, Result};

pub const NU_MIN: f64 = 0.5;
pub const NU_MAX: f64 = 100.0;
const GRID: usize = 64;
const MIN_SAMPLES: usize = 50;

fn check(nu: f64, kappa: f64) -> Result<()> {
    if !(nu > 0.0 && kappa > 0.0) || !nu.is_finite() || !kappa.is_finite() {
        return Err(Error::Domain(format!("need nu > 0 and kappa > 0, got nu = {nu}, kappa = {kappa}")));
    }
    Ok(())
}

/// CDF of `kappa * T`, `T ~ t(nu)`, through the regularized incomplete beta
/// function.
pub fn t_cdf(x: f64, nu: f64, kappa: f64) -> Result<f64> {
    check(nu, kappa)?;
    if x.is_nan() {
        return Err(Error::Domain("x is NaN".into()));
    }
    let t = x / kappa;
    if t == 0.0 {
        return Ok(0.5);
    }
    if t.is_infinite() {
        return Ok(if t > 0.0 { 1.0 } else { 0.0 });
    }
    let tail = 0.5 * beta_reg(0.5 * nu, 0.5, nu / (nu + t * t));
    Ok(if t > 0.0 { 1.0 - tail } else { tail })
}

/// Log-density of `kappa * T`, `T ~ t(nu)`.
pub fn t_logpdf(x: f64, nu: f64, kappa: f64) -> Result<f64> {
    check(nu, kappa)?;
    Ok(t_log_norm(nu) - kappa.ln() - 0.5 * (nu + 1.0) * ((x / kappa).powi(2) / nu).ln_1p())
}

fn t_log_norm(nu: f64) -> f64 {
    ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI).ln()
}

/// Quantile of `kappa * T` by bracketed bisection on [`t_cdf`].
pub fn t_quantile(p: f64, nu: f64, kappa: f64) -> Result<f64> {
    check(nu, kappa)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("probability {p} must lie in (0, 1)")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    let upper = p > 0.5;
    let target = if upper { p } else { 1.0 - p };
    let mut hi = 1.0;
    while t_cdf(hi, nu, 1.0)? < target {
        hi *= 2.0;
        if hi > 1e300 {
            return Ok(if upper { f64::INFINITY } else { f64::NEG_INFINITY });
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if t_cdf(mid, nu, 1.0)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let q = 0.5 * (lo + hi) * kappa;
    Ok(if upper { q } else { -q })
}

/// Profiled scale at fixed `nu`: EM fixed point
/// `kappa^2 = mean(w_i z_i^2)`, `w_i = (nu + 1)/(nu + z_i^2/kappa^2)`.
fn profile_kappa(z2: &[f64], nu: f64, start: f64) -> Option<f64> {
    let n = z2.len() as f64;
    let mut k2 = start * start;
    for _ in 0..5000 {
        let next = z2.iter().map(|&s| (nu + 1.0) * s / (nu + s / k2)).sum::<f64>() / n;
        if !(next > 0.0) || !next.is_finite() {
            return None;
        }
        let done = ((next - k2) / k2).abs() < 1e-13;
        k2 = next;
        if done {
            return Some(k2.sqrt());
        }
    }
    None
}

fn loglik(z2: &[f64], nu: f64, kappa: f64) -> f64 {
    let n = z2.len() as f64;
    let k2 = kappa * kappa;
    n * (t_log_norm(nu) - kappa.ln()) - 0.5 * (nu + 1.0) * z2.iter().map(|&s| (s / (k2 * nu)).ln_1p()).sum::<f64>()
}

/// Profile log-likelihood at `nu`: `(loglik, kappa)`.
fn profile(z2: &[f64], nu: f64, start: f64) -> Option<(f64, f64)> {
    let kappa = profile_kappa(z2, nu, start)?;
    let ll = loglik(z2, nu, kappa);
    ll.is_finite().then_some((ll, kappa))
}

/// Intermediate result of a scaled-t fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TFit {
    pub nu: f64,
    pub kappa: f64,
    pub loglik: f64,
}

/// Maximum-likelihood fit of `z ~ kappa t(nu)` to the mean-centered samples,
/// `nu` restricted to `[NU_MIN, NU_MAX]`.
///
/// Grid search over `ln nu` with the scale profiled out, then golden-section
/// refinement around the best grid point.
pub fn fit_t_mle(samples: &[f64]) -> Result<FitResult> {
    if samples.len() < MIN_SAMPLES {
        return Err(Error::DegenerateInput(format!("t fit needs >= {MIN_SAMPLES} samples, got {}", samples.len())));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("samples contain non-finite values".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let z2: Vec<f64> = samples.iter().map(|v| (v - mean).powi(2)).collect();
    let var = z2.iter().sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::DegenerateInput("samples are constant".into()));
    }
    let mut abs: Vec<f64> = samples.iter().map(|v| (v - mean).abs()).collect();
    abs.sort_by(f64::total_cmp);
    let start = abs[abs.len() / 2].max(var.sqrt() * 1e-3);

    let (lmin, lmax) = (NU_MIN.ln(), NU_MAX.ln());
    let grid: Vec<f64> = (0..GRID).map(|i| lmin + (lmax - lmin) * i as f64 / (GRID - 1) as f64).collect();
    let evals: Vec<Option<(f64, f64)>> = grid.par_iter().map(|&l| profile(&z2, l.exp(), start)).collect();
    let best = evals
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.map(|(ll, k)| (i, ll, k)))
        .max_by(|a, b| a.1.total_cmp(&b.1));
    let Some((bi, _, bk)) = best else {
        return Err(Error::NoConvergence { best_nu: f64::NAN, best_kappa: f64::NAN });
    };
    let fail = || Error::NoConvergence { best_nu: grid[bi].exp(), best_kappa: bk };

    let (mut a, mut b) = (grid[bi.saturating_sub(1)], grid[(bi + 1).min(GRID - 1)]);
    let f = |l: f64| profile(&z2, l.exp(), bk).map(|(ll, _)| -ll).ok_or_else(fail);
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while (b - a).abs() > 1e-10 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d)?;
        }
    }
    let nu = (0.5 * (a + b)).exp();
    let (ll, kappa) = profile(&z2, nu, bk).ok_or_else(fail)?;
    let (ll, nu, kappa) = match evals[bi] {
        Some((gll, gk)) if gll > ll => (gll, grid[bi].exp(), gk),
        _ => (ll, nu, kappa),
    };
    Ok(FitResult {
        family: Family::ScaledT,
        params: FitParams::ScaledT { nu, kappa },
        loglik: Some(ll),
        n_samples: samples.len(),
        centered_mean: Some(mean),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, stream_rng};
    use rand_distr::{Distribution, StandardNormal, StudentT};

    /// Simpson integration of the t density from 0 to x, an independent
    /// route to the CDF.
    fn cdf_by_quadrature(x: f64, nu: f64) -> f64 {
        let m = 20_000;
        let h = x / m as f64;
        let f = |t: f64| t_logpdf(t, nu, 1.0).unwrap().exp();
        let mut s = f(0.0) + f(x);
        for i in 1..m {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        0.5 + s * h / 3.0
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(t_cdf(0.0, 3.0, 2.0).unwrap(), 0.5);
        assert!((t_cdf(1.0, 1.0, 1.0).unwrap() - 0.75).abs() < 1e-12);
        assert!((t_cdf(2.015, 5.0, 1.0).unwrap() - 0.95).abs() < 5e-5);
        assert!((t_cdf(2.015, 5.0, 1.0).unwrap() - cdf_by_quadrature(2.015, 5.0)).abs() < 1e-10);
        assert!(t_cdf(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn cdf_against_quadrature_grid() {
        for nu in [0.7, 1.0, 2.5, 6.0, 40.0] {
            for x in [0.1, 0.8, 1.7, 4.0] {
                let want = cdf_by_quadrature(x, nu);
                assert!((t_cdf(x, nu, 1.0).unwrap() - want).abs() < 1e-10, "nu {nu} x {x}");
            }
        }
    }

    #[test]
    fn cauchy_closed_form() {
        for x in [-30.0f64, -2.0, -0.3, 0.5, 7.0] {
            let want = 0.5 + x.atan() / std::f64::consts::PI;
            assert!((t_cdf(x, 1.0, 1.0).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn logpdf_closed_form() {
        // nu = 1: Cauchy density 1/(pi kappa (1 + (x/kappa)^2))
        let got = t_logpdf(1.3, 1.0, 2.0).unwrap();
        let want = -(std::f64::consts::PI * 2.0 * (1.0 + 0.65f64.powi(2))).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for (p, nu, kappa) in [(0.95, 5.0, 1.0), (0.01, 2.0, 0.5), (0.999, 1.2, 3.0)] {
            let q = t_quantile(p, nu, kappa).unwrap();
            assert!((t_cdf(q, nu, kappa).unwrap() - p).abs() < 1e-12);
        }
        assert!((t_quantile(0.95, 5.0, 1.0).unwrap() - 2.015).abs() < 1e-3);
        assert!(t_quantile(1.0, 3.0, 1.0).is_err());
    }

    fn draw_scaled_t(nu: f64, kappa: f64, n: usize, seed: u64) -> Vec<f64> {
        let t = StudentT::new(nu).unwrap();
        let mut rng = stream_rng(seed, 0);
        (0..n).map(|_| kappa * t.sample(&mut rng)).collect()
    }

    #[test]
    fn recovers_parameters_across_seeds() {
        let ok = (1..=10u64)
            .filter(|&s| {
                let (nu, kappa) = fit_t_mle(&draw_scaled_t(5.0, 2.0, 100_000, s)).unwrap().t_params().unwrap();
                (4.5..=5.5).contains(&nu) && (1.9..=2.1).contains(&kappa)
            })
            .count();
        assert!(ok >= 9, "{ok}/10");
    }

    #[test]
    fn gaussian_hits_upper_region() {
        let mut rng = rng_from_seed(3);
        let s: Vec<f64> = (0..20_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (nu, _) = fit_t_mle(&s).unwrap().t_params().unwrap();
        assert!(nu >= 50.0, "nu {nu}");
    }

    #[test]
    fn scale_equivariance() {
        let s = draw_scaled_t(3.0, 1.0, 5000, 4);
        let (nu1, k1) = fit_t_mle(&s).unwrap().t_params().unwrap();
        let scaled: Vec<f64> = s.iter().map(|v| 7.5 * v).collect();
        let (nu2, k2) = fit_t_mle(&scaled).unwrap().t_params().unwrap();
        assert!((nu1 - nu2).abs() < 1e-3 * nu1);
        assert!((k2 - 7.5 * k1).abs() < 1e-3 * k2);
    }

    #[test]
    fn fit_records_centering_and_loglik() {
        let s: Vec<f64> = draw_scaled_t(4.0, 1.0, 2000, 5).iter().map(|v| v + 10.0).collect();
        let f = fit_t_mle(&s).unwrap();
        assert!((f.centered_mean.unwrap() - 10.0).abs() < 0.2);
        let (nu, kappa) = f.t_params().unwrap();
        let m = f.centered_mean.unwrap();
        let direct: f64 = s.iter().map(|v| t_logpdf(v - m, nu, kappa).unwrap()).sum();
        assert!((direct - f.loglik.unwrap()).abs() < 1e-8 * direct.abs());
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(fit_t_mle(&[1.0; 10]), Err(Error::DegenerateInput(_))));
        assert!(matches!(fit_t_mle(&[1.0; 60]), Err(Error::DegenerateInput(_))));
    }

    proptest::proptest! {
        #[test]
        fn symmetric_and_monotone(nu in 0.3f64..80.0, kappa in 0.1f64..10.0, x in -50.0f64..50.0, dx in 0.0f64..5.0) {
            let a = t_cdf(x, nu, kappa).unwrap();
            proptest::prop_assert!((a + t_cdf(-x, nu, kappa).unwrap() - 1.0).abs() < 1e-10);
            proptest::prop_assert!(t_cdf(x + dx, nu, kappa).unwrap() >= a);
        }
    }
}
