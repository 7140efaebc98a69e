//! Closed-form bounds on the asymptotic tail-index of hSGD.
//!
//! With `c = 2nB(lambda_1^2 + n delta) / (gamma lambda_1^4)`:
//!
//! * upper bound `eta^* = 1 + c`,
//! * lower bound `eta_* = 1 + c - sum_{i>=2} lambda_i^2 / lambda_1^2`, valid
//!   when `gamma < gamma_bar = 2nB(lambda_1^2 + n delta) / (lambda_1^2 tr(A^T A))`.
//!
//! The lower bound rests on a drift condition whose margin is the concave
//! quadratic `q(m, rho)` evaluated on the Rayleigh-quotient range
//! `[lambda_d^2, lambda_1^2]`; [`drift_condition_margin`] evaluates it.

use serde::{Deserialize, Serialize};

use crate::dataio::Spectrum;
use crate::sgd::OptimConfig;
use crate::{Error, Result};

fn check_common(n: usize, batch: usize, delta: f64, gamma: f64) -> Result<()> {
    if n == 0 || batch == 0 {
        return Err(Error::Domain(format!("n = {n} and B = {batch} must be >= 1")));
    }
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::Domain(format!("delta = {delta} must be finite and >= 0")));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Domain(format!("gamma = {gamma} must be finite and > 0")));
    }
    Ok(())
}

fn check_spectrum(lambdas: &[f64]) -> Result<()> {
    match lambdas.first() {
        Some(&l1) if l1 > 0.0 && l1.is_finite() => {}
        _ => return Err(Error::Domain("lambda_1 must be finite and > 0".into())),
    }
    if lambdas.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::Domain("singular values must be >= 0".into()));
    }
    if lambdas.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::Domain("singular values must be sorted in descending order".into()));
    }
    Ok(())
}

// 2nB(lambda_1^2 + n delta)
fn numerator(n: usize, batch: usize, delta: f64, lambda1: f64) -> f64 {
    let n = n as f64;
    2.0 * n * batch as f64 * (lambda1 * lambda1 + n * delta)
}

/// `eta^* = 1 + 2nB(lambda_1^2 + n delta) / (gamma lambda_1^4)`.
pub fn eta_upper(n: usize, batch: usize, delta: f64, gamma: f64, lambda1: f64) -> Result<f64> {
    check_common(n, batch, delta, gamma)?;
    check_spectrum(&[lambda1])?;
    Ok(1.0 + numerator(n, batch, delta, lambda1) / (gamma * lambda1.powi(4)))
}

/// `sum_{i>=2} lambda_i^2 / lambda_1^2`.
pub fn spectral_correction(lambdas: &[f64]) -> Result<f64> {
    check_spectrum(lambdas)?;
    let l1sq = lambdas[0] * lambdas[0];
    Ok(lambdas[1..].iter().map(|l| l * l).sum::<f64>() / l1sq)
}

/// `eta_* = eta^* - sum_{i>=2} lambda_i^2 / lambda_1^2`.
pub fn eta_lower(n: usize, batch: usize, delta: f64, gamma: f64, lambdas: &[f64]) -> Result<f64> {
    check_spectrum(lambdas)?;
    Ok(eta_upper(n, batch, delta, gamma, lambdas[0])? - spectral_correction(lambdas)?)
}

/// Critical learning rate below which the lower bound applies.
pub fn gamma_bar(n: usize, batch: usize, delta: f64, lambdas: &[f64]) -> Result<f64> {
    check_common(n, batch, delta, 1.0)?;
    check_spectrum(lambdas)?;
    let l1sq = lambdas[0] * lambdas[0];
    let trace: f64 = lambdas.iter().map(|l| l * l).sum();
    Ok(numerator(n, batch, delta, lambdas[0]) / (l1sq * trace))
}

/// Expected top eigenvalue of a Wishart matrix `A^T A` with `N(0, sigma2)`
/// entries: `sigma2 (sqrt(n - 1) + sqrt(d))^2`.
pub fn wishart_expected_lambda1sq(n: usize, d: usize, sigma2: f64) -> Result<f64> {
    if !(n > d && d >= 1) {
        return Err(Error::Domain(format!("need n > d >= 1, got n = {n}, d = {d}")));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::Domain(format!("sigma2 = {sigma2} must be > 0")));
    }
    Ok(sigma2 * (((n - 1) as f64).sqrt() + (d as f64).sqrt()).powi(2))
}

/// Exponent at which the drift-condition margin vanishes at `m = lambda_1^2`:
/// `2 + c - sum_{i>=1} lambda_i^2 / lambda_1^2`, which equals `eta_*`.
pub fn drift_exponent(n: usize, batch: usize, delta: f64, gamma: f64, lambdas: &[f64]) -> Result<f64> {
    check_common(n, batch, delta, gamma)?;
    check_spectrum(lambdas)?;
    let l1sq = lambdas[0] * lambdas[0];
    let trace: f64 = lambdas.iter().map(|l| l * l).sum();
    Ok(2.0 + numerator(n, batch, delta, lambdas[0]) / (gamma * l1sq * l1sq) - trace / l1sq)
}

/// `q(m, rho) = 2nB(m + n delta)/gamma - tr(A^T A) m + (2 - rho) m^2`.
pub fn drift_q(m: f64, rho: f64, n: usize, batch: usize, delta: f64, gamma: f64, trace_ata: f64) -> f64 {
    let nf = n as f64;
    2.0 * nf * batch as f64 * (m + nf * delta) / gamma - trace_ata * m + (2.0 - rho) * m * m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftMargin {
    pub q_at_lambda1sq: f64,
    pub q_at_lambdadsq: f64,
    pub inf_q: f64,
    pub satisfied: bool,
}

/// Infimum of `q(., rho)` over `[lambda_d^2, lambda_1^2]`. For `rho >= 2`
/// the map is concave in `m`, so the endpoints suffice.
pub fn drift_condition_margin(
    lambdas: &[f64],
    n: usize,
    batch: usize,
    delta: f64,
    gamma: f64,
    rho: f64,
) -> Result<DriftMargin> {
    check_common(n, batch, delta, gamma)?;
    check_spectrum(lambdas)?;
    if !(rho >= 2.0) {
        return Err(Error::Domain(format!("rho = {rho} must be >= 2")));
    }
    let trace: f64 = lambdas.iter().map(|l| l * l).sum();
    let l1sq = lambdas[0] * lambdas[0];
    let ldsq = lambdas[lambdas.len() - 1].powi(2);
    let q1 = drift_q(l1sq, rho, n, batch, delta, gamma, trace);
    let qd = drift_q(ldsq, rho, n, batch, delta, gamma, trace);
    let inf_q = q1.min(qd);
    Ok(DriftMargin { q_at_lambda1sq: q1, q_at_lambdadsq: qd, inf_q, satisfied: inf_q > 0.0 })
}

pub fn drift_condition_margin_for(spec: &Spectrum, cfg: &OptimConfig, rho: f64) -> Result<DriftMargin> {
    drift_condition_margin(spec.sigma(), spec.n(), cfg.batch, cfg.delta, cfg.gamma, rho)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailBounds {
    pub eta_lower: f64,
    pub eta_upper: f64,
    pub gamma_bar: f64,
    /// `gamma < gamma_bar`, i.e. the lower bound is backed by the theory.
    pub valid_lower: bool,
}

impl TailBounds {
    pub fn compute(n: usize, batch: usize, delta: f64, gamma: f64, lambdas: &[f64]) -> Result<Self> {
        let eta_upper = eta_upper(n, batch, delta, gamma, lambdas.first().copied().unwrap_or(0.0))?;
        let eta_lower = eta_lower(n, batch, delta, gamma, lambdas)?;
        let gamma_bar = gamma_bar(n, batch, delta, lambdas)?;
        Ok(Self { eta_lower, eta_upper, gamma_bar, valid_lower: gamma < gamma_bar })
    }

    pub fn for_spectrum(spec: &Spectrum, cfg: &OptimConfig) -> Result<Self> {
        Self::compute(spec.n(), cfg.batch, cfg.delta, cfg.gamma, spec.sigma())
    }
}

/// `bounds.json` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub n: usize,
    pub d: usize,
    #[serde(rename = "B")]
    pub batch: usize,
    pub gamma: f64,
    pub delta: f64,
    pub lambda1: f64,
    #[serde(rename = "trace_AtA")]
    pub trace_ata: f64,
    pub eta_lower: f64,
    pub eta_upper: f64,
    pub gamma_bar: f64,
    pub valid_lower: bool,
}

impl BoundsReport {
    pub fn new(n: usize, batch: usize, delta: f64, gamma: f64, lambdas: &[f64]) -> Result<Self> {
        let b = TailBounds::compute(n, batch, delta, gamma, lambdas)?;
        Ok(Self {
            n,
            d: lambdas.len(),
            batch,
            gamma,
            delta,
            lambda1: lambdas[0],
            trace_ata: lambdas.iter().map(|l| l * l).sum(),
            eta_lower: b.eta_lower,
            eta_upper: b.eta_upper,
            gamma_bar: b.gamma_bar,
            valid_lower: b.valid_lower,
        })
    }
}
