use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use super::{percentile_sorted, sorted_finite, Family, FitParams, FitResult};
use crate::rng::rng_from_seed;
use crate::{Error, Result};

const MIN_SAMPLES: usize = 100;

fn check(alpha: f64, skew: f64, scale: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 2.0) {
        return Err(Error::Domain(format!("alpha = {alpha} must lie in (0, 2]")));
    }
    if !(-1.0..=1.0).contains(&skew) {
        return Err(Error::Domain(format!("skew = {skew} must lie in [-1, 1]")));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Domain(format!("scale = {scale} must be > 0")));
    }
    Ok(())
}

/// One standard (unit scale, zero location) draw by the Chambers–Mallows–Stuck
/// transformation of a uniform angle and an exponential variate.
fn cms_standard(alpha: f64, skew: f64, v: f64, w: f64) -> f64 {
    if alpha == 1.0 {
        let a = FRAC_PI_2 + skew * v;
        return (a * v.tan() - skew * (FRAC_PI_2 * w * v.cos() / a).ln()) / FRAC_PI_2;
    }
    let t = skew * (PI * alpha / 2.0).tan();
    let b = t.atan() / alpha;
    let s = (1.0 + t * t).powf(1.0 / (2.0 * alpha));
    let av = alpha * (v + b);
    s * av.sin() / v.cos().powf(1.0 / alpha) * ((v - av).cos() / w).powf((1.0 - alpha) / alpha)
}

/// `n` α-stable draws in the S1 parameterization.
pub fn stable_sample_cms<R: Rng + ?Sized>(
    alpha: f64,
    skew: f64,
    scale: f64,
    location: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check(alpha, skew, scale)?;
    let shift = if alpha == 1.0 { location + 2.0 / PI * skew * scale * scale.ln() } else { location };
    Ok((0..n)
        .map(|_| {
            let v = PI * (rng.random::<f64>() - 0.5);
            let w: f64 = Exp1.sample(rng);
            scale * cms_standard(alpha, skew, v, w) + shift
        })
        .collect())
}

// McCulloch (1986) quantile tables. Rows follow `NU_ALPHA`, columns `NU_BETA`.
const NU_ALPHA: [f64; 15] = [2.439, 2.5, 2.6, 2.7, 2.8, 3.0, 3.2, 3.5, 4.0, 5.0, 6.0, 8.0, 10.0, 15.0, 25.0];
const NU_BETA: [f64; 7] = [0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0];

const PSI_ALPHA: [[f64; 7]; 15] = [
    [2.000, 2.000, 2.000, 2.000, 2.000, 2.000, 2.000],
    [1.916, 1.924, 1.924, 1.924, 1.924, 1.924, 1.924],
    [1.808, 1.813, 1.829, 1.829, 1.829, 1.829, 1.829],
    [1.729, 1.730, 1.737, 1.745, 1.745, 1.745, 1.745],
    [1.664, 1.663, 1.663, 1.668, 1.676, 1.676, 1.676],
    [1.563, 1.560, 1.553, 1.548, 1.547, 1.547, 1.547],
    [1.484, 1.480, 1.471, 1.460, 1.448, 1.438, 1.438],
    [1.391, 1.386, 1.378, 1.364, 1.337, 1.318, 1.318],
    [1.279, 1.273, 1.266, 1.250, 1.210, 1.184, 1.150],
    [1.128, 1.121, 1.114, 1.101, 1.067, 1.027, 0.973],
    [1.029, 1.021, 1.014, 1.004, 0.974, 0.935, 0.874],
    [0.896, 0.892, 0.884, 0.883, 0.855, 0.823, 0.769],
    [0.818, 0.812, 0.806, 0.801, 0.780, 0.756, 0.691],
    [0.698, 0.695, 0.692, 0.689, 0.676, 0.656, 0.597],
    [0.593, 0.590, 0.588, 0.586, 0.579, 0.563, 0.513],
];

const PSI_BETA: [[f64; 7]; 15] = [
    [0.0, 2.160, 1.000, 1.000, 1.000, 1.000, 1.000],
    [0.0, 1.592, 3.390, 1.000, 1.000, 1.000, 1.000],
    [0.0, 0.759, 1.800, 1.000, 1.000, 1.000, 1.000],
    [0.0, 0.482, 1.048, 1.694, 1.000, 1.000, 1.000],
    [0.0, 0.360, 0.760, 1.232, 2.229, 1.000, 1.000],
    [0.0, 0.253, 0.518, 0.823, 1.575, 1.000, 1.000],
    [0.0, 0.203, 0.410, 0.632, 1.244, 1.906, 1.000],
    [0.0, 0.165, 0.332, 0.499, 0.943, 1.560, 1.000],
    [0.0, 0.136, 0.271, 0.404, 0.689, 1.230, 2.195],
    [0.0, 0.109, 0.216, 0.323, 0.539, 0.827, 1.917],
    [0.0, 0.096, 0.190, 0.284, 0.472, 0.693, 1.759],
    [0.0, 0.082, 0.163, 0.243, 0.412, 0.601, 1.596],
    [0.0, 0.074, 0.147, 0.220, 0.377, 0.546, 1.482],
    [0.0, 0.064, 0.128, 0.191, 0.330, 0.478, 1.362],
    [0.0, 0.056, 0.112, 0.167, 0.285, 0.428, 1.274],
];

// Rows follow `ALPHA` (ascending), columns `BETA`.
const ALPHA: [f64; 16] = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7, 1.8, 1.9, 2.0];
const BETA: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

const PHI_C: [[f64; 5]; 16] = [
    [2.588, 3.073, 4.534, 6.636, 9.144],
    [2.337, 2.634, 3.542, 4.808, 6.247],
    [2.189, 2.392, 3.004, 3.844, 4.775],
    [2.098, 2.244, 2.676, 3.265, 3.912],
    [2.040, 2.149, 2.461, 2.886, 3.356],
    [2.000, 2.085, 2.311, 2.624, 2.973],
    [1.980, 2.040, 2.205, 2.435, 2.696],
    [1.965, 2.007, 2.125, 2.294, 2.491],
    [1.955, 1.984, 2.067, 2.188, 2.333],
    [1.946, 1.967, 2.022, 2.106, 2.211],
    [1.939, 1.952, 1.988, 2.045, 2.116],
    [1.933, 1.940, 1.962, 1.997, 2.043],
    [1.927, 1.930, 1.943, 1.961, 1.987],
    [1.921, 1.922, 1.927, 1.936, 1.947],
    [1.914, 1.915, 1.916, 1.918, 1.921],
    [1.908, 1.908, 1.908, 1.908, 1.908],
];

const PHI_ZETA: [[f64; 5]; 16] = [
    [0.0, -0.061, -0.279, -0.659, -1.198],
    [0.0, -0.078, -0.272, -0.581, -0.997],
    [0.0, -0.089, -0.262, -0.520, -0.853],
    [0.0, -0.096, -0.250, -0.469, -0.742],
    [0.0, -0.099, -0.237, -0.424, -0.652],
    [0.0, -0.098, -0.223, -0.380, -0.576],
    [0.0, -0.095, -0.208, -0.346, -0.508],
    [0.0, -0.090, -0.192, -0.310, -0.447],
    [0.0, -0.084, -0.173, -0.276, -0.390],
    [0.0, -0.075, -0.154, -0.241, -0.335],
    [0.0, -0.066, -0.134, -0.206, -0.283],
    [0.0, -0.056, -0.111, -0.170, -0.232],
    [0.0, -0.043, -0.088, -0.132, -0.179],
    [0.0, -0.030, -0.061, -0.092, -0.123],
    [0.0, -0.017, -0.032, -0.049, -0.064],
    [0.0, 0.000, 0.000, 0.000, 0.000],
];

/// Index of the cell containing `x` and the weight of its upper node, with
/// `x` clamped to the grid.
fn locate(grid: &[f64], x: f64) -> (usize, f64) {
    let x = x.clamp(grid[0], grid[grid.len() - 1]);
    let i = grid.partition_point(|g| *g <= x).clamp(1, grid.len() - 1) - 1;
    (i, (x - grid[i]) / (grid[i + 1] - grid[i]))
}

/// Bilinear interpolation of `table[row][col]` over `rows` × `cols`.
fn bilinear<const C: usize>(rows: &[f64], cols: &[f64; C], table: &[[f64; C]], r: f64, c: f64) -> f64 {
    let (i, u) = locate(rows, r);
    let (j, v) = locate(cols, c);
    (1.0 - u) * ((1.0 - v) * table[i][j] + v * table[i][j + 1]) + u * ((1.0 - v) * table[i + 1][j] + v * table[i + 1][j + 1])
}

/// McCulloch quantile estimator of `(alpha, skew, scale, location)` from the
/// 5/25/50/75/95% sample percentiles; `alpha` is clamped to `[0.6, 2]`.
pub fn fit_stable_quantile(samples: &[f64]) -> Result<FitResult> {
    if samples.len() < MIN_SAMPLES {
        return Err(Error::DegenerateInput(format!("stable fit needs >= {MIN_SAMPLES} samples, got {}", samples.len())));
    }
    let sorted = sorted_finite(samples)?;
    let q = |p: f64| percentile_sorted(&sorted, p);
    let (p05, p25, p50, p75, p95) = (q(0.05), q(0.25), q(0.5), q(0.75), q(0.95));
    let iqr = p75 - p25;
    if !(iqr > 0.0) || !(p95 > p05) {
        return Err(Error::DegenerateInput("degenerate sample quantiles (zero spread)".into()));
    }
    let nu_alpha = (p95 - p05) / iqr;
    let nu_beta = (p95 + p05 - 2.0 * p50) / (p95 - p05);
    let sign = if nu_beta < 0.0 { -1.0 } else { 1.0 };

    let (alpha, skew) = if nu_alpha >= NU_ALPHA[0] {
        let a = bilinear(&NU_ALPHA, &NU_BETA, &PSI_ALPHA, nu_alpha, nu_beta.abs());
        let b = sign * bilinear(&NU_ALPHA, &NU_BETA, &PSI_BETA, nu_alpha, nu_beta.abs());
        (a.clamp(0.6, 2.0), b.clamp(-1.0, 1.0))
    } else {
        (2.0, if nu_beta == 0.0 { 0.0 } else { sign })
    };
    let scale = iqr / bilinear(&ALPHA, &BETA, &PHI_C, alpha, skew.abs());
    let zeta = p50 + scale * sign * bilinear(&ALPHA, &BETA, &PHI_ZETA, alpha, skew.abs());
    let location = if alpha == 1.0 { zeta } else { zeta - skew * scale * (PI * alpha / 2.0).tan() };
    Ok(FitResult {
        family: Family::AlphaStable,
        params: FitParams::AlphaStable { alpha, skew, scale, location },
        loglik: None,
        n_samples: samples.len(),
        centered_mean: None,
    })
}

/// Quantiles of a stable law from a large sorted CMS sample.
#[derive(Debug, Clone)]
pub struct StableQuantiles {
    sorted: Vec<f64>,
}

impl StableQuantiles {
    pub fn from_cms(alpha: f64, skew: f64, scale: f64, location: f64, draws: usize, seed: u64) -> Result<Self> {
        if draws < 2 {
            return Err(Error::Domain("need at least two draws".into()));
        }
        let mut rng = rng_from_seed(seed);
        let sorted = sorted_finite(&stable_sample_cms(alpha, skew, scale, location, draws, &mut rng)?)?;
        Ok(Self { sorted })
    }

    pub fn from_fit(fit: &FitResult, draws: usize, seed: u64) -> Result<Self> {
        let (a, b, c, d) = fit.stable_params().ok_or_else(|| Error::Domain("not an alpha-stable fit".into()))?;
        Self::from_cms(a, b, c, d, draws, seed)
    }

    /// The sorted draws.
    pub fn draws(&self) -> &[f64] {
        &self.sorted
    }

    pub fn quantile(&self, p: f64) -> f64 {
        percentile_sorted(&self.sorted, p)
    }
}
