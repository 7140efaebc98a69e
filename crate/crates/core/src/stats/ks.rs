use serde::{Deserialize, Serialize};

use super::sorted_finite;
use crate::{Error, Result};

const MIN_SAMPLES: usize = 5;
const LEVEL: f64 = 0.05;

/// A reference distribution function with its left limit, so step CDFs
/// (e.g. an empirical CDF) are handled exactly.
pub trait Cdf {
    fn cdf(&self, x: f64) -> f64;
    fn cdf_left(&self, x: f64) -> f64 {
        self.cdf(x)
    }
}

impl<F: Fn(f64) -> f64> Cdf for F {
    fn cdf(&self, x: f64) -> f64 {
        self(x)
    }
}

/// Empirical CDF of a fixed sample.
#[derive(Debug, Clone)]
pub struct StepCdf {
    sorted: Vec<f64>,
}

impl StepCdf {
    pub fn new(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::DegenerateInput("empty sample".into()));
        }
        Ok(Self { sorted: sorted_finite(samples)? })
    }
}

impl Cdf for StepCdf {
    fn cdf(&self, x: f64) -> f64 {
        self.sorted.partition_point(|v| *v <= x) as f64 / self.sorted.len() as f64
    }
    fn cdf_left(&self, x: f64) -> f64 {
        self.sorted.partition_point(|v| *v < x) as f64 / self.sorted.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KsVariant {
    TwoSided,
    /// Null `F_sample >= F_ref` everywhere; statistic `sup (F_ref - F_sample)`.
    OneSidedGeq,
    /// Null `F_sample <= F_ref` everywhere; statistic `sup (F_sample - F_ref)`.
    OneSidedLeq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Reject,
    Retain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub variant: KsVariant,
    #[serde(rename = "D")]
    pub statistic: f64,
    #[serde(rename = "p")]
    pub p_value: f64,
    pub n_effective: f64,
    /// Decision at level 0.05.
    pub decision: Decision,
}

impl KsResult {
    fn new(variant: KsVariant, statistic: f64, n_effective: f64) -> Self {
        let lambda = n_effective.sqrt() * statistic;
        let p_value = match variant {
            KsVariant::TwoSided => kolmogorov_sf(lambda),
            _ => (-2.0 * lambda * lambda).exp(),
        }
        .clamp(0.0, 1.0);
        let decision = if p_value < LEVEL { Decision::Reject } else { Decision::Retain };
        Self { variant, statistic, p_value, n_effective, decision }
    }

    pub fn rejects(&self) -> bool {
        self.decision == Decision::Reject
    }
}

/// `P(K > lambda)` for the Kolmogorov distribution, series truncated once
/// terms fall below 1e-12.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if !(lambda > 0.0) {
        return 1.0;
    }
    if lambda < 1.18 {
        // Theta-function form, fast for small lambda.
        let c = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let mut s = 0.0;
        for k in 1.. {
            let j = (2 * k - 1) as f64;
            let term = (c * j * j).exp();
            s += term;
            if term < 1e-12 {
                break;
            }
        }
        return (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0);
    }
    let mut s = 0.0;
    for k in 1.. {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov test with asymptotic p-values.
pub fn ks_test<C: Cdf + ?Sized>(samples: &[f64], reference: &C, variant: KsVariant) -> Result<KsResult> {
    if samples.len() < MIN_SAMPLES {
        return Err(Error::DegenerateInput(format!("KS test needs >= {MIN_SAMPLES} samples, got {}", samples.len())));
    }
    let sorted = sorted_finite(samples)?;
    let n = sorted.len() as f64;
    // Sample above reference (d_plus) / below reference (d_minus), checked at
    // every distinct value and at its left limit.
    let (mut d_plus, mut d_minus) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < sorted.len() {
        let x = sorted[i];
        let below = i as f64 / n;
        while i < sorted.len() && sorted[i] == x {
            i += 1;
        }
        let at = i as f64 / n;
        for diff in [at - reference.cdf(x), below - reference.cdf_left(x)] {
            d_plus = d_plus.max(diff);
            d_minus = d_minus.max(-diff);
        }
    }
    let statistic = match variant {
        KsVariant::TwoSided => d_plus.max(d_minus),
        KsVariant::OneSidedGeq => d_minus,
        KsVariant::OneSidedLeq => d_plus,
    };
    Ok(KsResult::new(variant, statistic.clamp(0.0, 1.0), n))
}

/// Two-sided two-sample test; effective size `n m / (n + m)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.len() < MIN_SAMPLES || b.len() < MIN_SAMPLES {
        return Err(Error::DegenerateInput(format!("KS test needs >= {MIN_SAMPLES} samples per side")));
    }
    let (sa, sb) = (sorted_finite(a)?, sorted_finite(b)?);
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < sa.len() && j < sb.len() {
        let x = sa[i].min(sb[j]);
        while i < sa.len() && sa[i] == x {
            i += 1;
        }
        while j < sb.len() && sb[j] == x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(KsResult::new(KsVariant::TwoSided, d, na * nb / (na + nb)))
}
