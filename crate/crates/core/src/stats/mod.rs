//! Empirical distribution tooling: CCDF and QQ extraction, scaled Student-t
//! fitting, α-stable sampling and quantile fitting, Kolmogorov–Smirnov tests.

mod ccdf;
mod ks;
mod qq;
mod stable;
mod student_t;

pub use ccdf::{ccdf_csv, empirical_ccdf, tail_slope};
pub use ks::{kolmogorov_sf, ks_test, ks_two_sample, Cdf, Decision, KsResult, KsVariant, StepCdf};
pub use qq::{hazen_quantile, qq_csv, qq_points};
pub use stable::{fit_stable_quantile, stable_sample_cms, StableQuantiles};
pub use student_t::{fit_t_mle, t_cdf, t_logpdf, t_quantile, TFit, NU_MAX, NU_MIN};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ScaledT,
    AlphaStable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FitParams {
    ScaledT { nu: f64, kappa: f64 },
    AlphaStable { alpha: f64, skew: f64, scale: f64, location: f64 },
}

/// A fitted parametric family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub family: Family,
    pub params: FitParams,
    /// Absent for quantile-based fits.
    pub loglik: Option<f64>,
    #[serde(rename = "n")]
    pub n_samples: usize,
    /// Sample mean subtracted before fitting, when the fitter centered.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub centered_mean: Option<f64>,
}

impl FitResult {
    /// `(nu, kappa)` for a scaled-t fit.
    pub fn t_params(&self) -> Option<(f64, f64)> {
        match self.params {
            FitParams::ScaledT { nu, kappa } => Some((nu, kappa)),
            _ => None,
        }
    }

    /// `(alpha, skew, scale, location)` for a stable fit.
    pub fn stable_params(&self) -> Option<(f64, f64, f64, f64)> {
        match self.params {
            FitParams::AlphaStable { alpha, skew, scale, location } => Some((alpha, skew, scale, location)),
            _ => None,
        }
    }
}

/// Sample percentile by linear interpolation between order statistics
/// (position `(n-1) p`); `sorted` must be ascending.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub(crate) fn sorted_finite(samples: &[f64]) -> crate::Result<Vec<f64>> {
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(crate::Error::DegenerateInput("samples contain non-finite values".into()));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}
