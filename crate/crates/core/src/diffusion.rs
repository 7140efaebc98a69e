//! Homogenized SGD and its Pearson-diffusion comparison.
//!
//! Three Euler–Maruyama simulators share one increment interface:
//!
//! * [`simulate_hsgd`] integrates `dX = -gamma grad f(X) dt + gamma sqrt(2 L(X) A^T A / (n^2 B)) dW`
//!   in the original coordinates;
//! * [`simulate_z_system`] integrates the rescaled principal components
//!   `dZ_i = -theta_i (Z_i - mu_i) dt + sqrt(2 theta_i a_i (|Z|^2 + 1)) dB_i`, coupled
//!   only through `|Z|^2`;
//! * [`simulate_pearson`] integrates one decoupled coordinate with `Z_i^2`
//!   in place of `|Z|^2`.
//!
//! Feeding the same increments to the coupled and decoupled systems is what
//! [`convex_order_check`] uses to compare their moments path by path.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Spectrum};
use crate::linalg::expm;
use crate::rng::stream_rng;
use crate::sgd::{standard_normals, OptimConfig};
use crate::{Error, Result};

/// Largest moment order the matrix-exponential oracle accepts.
pub const MAX_MOMENT_ORDER: usize = 30;

/// Source of Brownian increments for a step of length `h`.
pub trait Increments {
    fn fill(&mut self, h: f64, dw: &mut [f64]);
}

/// Fresh `N(0, h)` increments from a generator.
pub struct GaussianIncrements<R>(pub R);

impl<R: Rng> Increments for GaussianIncrements<R> {
    fn fill(&mut self, h: f64, dw: &mut [f64]) {
        standard_normals(&mut self.0, dw);
        let s = h.sqrt();
        dw.iter_mut().for_each(|v| *v *= s);
    }
}

/// Replays pre-computed increments (already scaled to the step length).
pub struct ReplayIncrements<'a> {
    data: &'a [f64],
    pos: usize,
}

impl<'a> ReplayIncrements<'a> {
    pub fn new(data: &'a [f64]) -> Self {
        Self { data, pos: 0 }
    }
}

impl Increments for ReplayIncrements<'_> {
    fn fill(&mut self, _h: f64, dw: &mut [f64]) {
        let end = self.pos + dw.len();
        assert!(end <= self.data.len(), "replayed increments exhausted");
        dw.copy_from_slice(&self.data[self.pos..end]);
        self.pos = end;
    }
}

/// Step size, horizon and recording mode of an Euler–Maruyama run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub h: f64,
    pub horizon: f64,
    /// Keep every state; otherwise only the initial and final states.
    pub record: bool,
}

impl EmOptions {
    pub fn new(h: f64, horizon: f64) -> Self {
        Self { h, horizon, record: true }
    }

    pub fn terminal(h: f64, horizon: f64) -> Self {
        Self { h, horizon, record: false }
    }

    /// Number of steps and the uniform step that lands exactly on the horizon.
    pub fn grid(&self) -> Result<(usize, f64)> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::Domain(format!("step h = {} must be > 0", self.h)));
        }
        if !(self.horizon >= self.h) || !self.horizon.is_finite() {
            return Err(Error::Domain(format!("horizon T = {} must be >= h = {}", self.horizon, self.h)));
        }
        let steps = (self.horizon / self.h).round().max(1.0) as usize;
        Ok((steps, self.horizon / steps as f64))
    }
}

/// A simulated path: `times` and row-major `states` (one row per time).
#[derive(Debug, Clone, PartialEq)]
pub struct SdePath {
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub dim: usize,
    pub h: f64,
    pub seed: Option<u64>,
}

impl SdePath {
    fn start(z0: &[f64], h: f64) -> Self {
        Self { times: vec![0.0], states: z0.to_vec(), dim: z0.len(), h, seed: None }
    }

    fn push(&mut self, t: f64, z: &[f64]) {
        self.times.push(t);
        self.states.extend_from_slice(z);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// CSV with header `t,z1,...,zd`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for i in 1..=self.dim {
            out.push_str(&format!(",z{i}"));
        }
        out.push('\n');
        for k in 0..self.len() {
            out.push_str(&format!("{:e}", self.times[k]));
            for v in self.state(k) {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Drives an EM loop: `step(z, dw, h)` advances the state in place.
fn integrate<I, F>(z0: &[f64], opts: EmOptions, noise: &mut I, mut step: F) -> Result<SdePath>
where
    I: Increments + ?Sized,
    F: FnMut(&mut [f64], &[f64], f64),
{
    let (steps, h) = opts.grid()?;
    let mut path = SdePath::start(z0, h);
    let mut z = z0.to_vec();
    let mut dw = vec![0.0; z0.len()];
    for k in 1..=steps {
        noise.fill(h, &mut dw);
        step(&mut z, &dw, h);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: k });
        }
        if opts.record || k == steps {
            path.push(k as f64 * h, &z);
        }
    }
    Ok(path)
}

/// Parameters of one decoupled Pearson diffusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PearsonCoord {
    pub theta: f64,
    pub mu: f64,
    pub a: f64,
}

impl PearsonCoord {
    pub fn new(theta: f64, mu: f64, a: f64) -> Result<Self> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::Domain(format!("theta = {theta} must be > 0")));
        }
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::Domain(format!("a = {a} must be > 0")));
        }
        if !mu.is_finite() {
            return Err(Error::Domain("mu must be finite".into()));
        }
        Ok(Self { theta, mu, a })
    }

    /// Coordinate whose stationary law has tail parameter `nu > 1`.
    pub fn from_nu(theta: f64, mu: f64, nu: f64) -> Result<Self> {
        if !(nu > 1.0) {
            return Err(Error::Domain(format!("nu = {nu} must be > 1")));
        }
        Self::new(theta, mu, 1.0 / (nu - 1.0))
    }

    /// `nu = 1 + 1/a`.
    pub fn nu(&self) -> f64 {
        1.0 + 1.0 / self.a
    }

    fn diffusion_sq(&self, s: f64) -> f64 {
        2.0 * self.theta * self.a * s
    }
}

/// Per-coordinate parameters of the rescaled system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PearsonParams {
    pub theta: Vec<f64>,
    pub mu: Vec<f64>,
    pub a: Vec<f64>,
    pub nu: Vec<f64>,
}

impl PearsonParams {
    pub fn from_coords(coords: &[PearsonCoord]) -> Self {
        Self {
            theta: coords.iter().map(|c| c.theta).collect(),
            mu: coords.iter().map(|c| c.mu).collect(),
            a: coords.iter().map(|c| c.a).collect(),
            nu: coords.iter().map(|c| c.nu()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn coord(&self, i: usize) -> PearsonCoord {
        PearsonCoord { theta: self.theta[i], mu: self.mu[i], a: self.a[i] }
    }

    /// `0.01 / max_i theta_i`.
    pub fn default_step(&self) -> f64 {
        0.01 / self.theta.iter().copied().fold(0.0, f64::max)
    }

    /// `10 / min_i theta_i`: ten relaxation times of the slowest coordinate.
    pub fn burn_in(&self) -> f64 {
        10.0 / self.theta.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `theta_i = gamma (lambda_i^2/n + delta)`,
/// `mu_i = n lambda_i alpha_i / (sqrt(beta) (lambda_i^2 + n delta))`,
/// `a_i = gamma lambda_i^4 / (2 n B (lambda_i^2 + n delta))`, `nu_i = 1 + 1/a_i`.
pub fn build_pearson_params(spec: &Spectrum, cfg: &OptimConfig) -> Result<PearsonParams> {
    spec.check_assumption()?;
    if !(cfg.gamma > 0.0) {
        return Err(Error::Domain(format!("gamma = {} must be > 0", cfg.gamma)));
    }
    if cfg.batch == 0 {
        return Err(Error::Domain("batch size must be >= 1".into()));
    }
    let n = spec.n() as f64;
    let b = cfg.batch as f64;
    let (gamma, delta) = (cfg.gamma, cfg.delta);
    let sqrt_beta = spec.beta().sqrt();
    let mut coords = Vec::with_capacity(spec.d());
    for (i, &l) in spec.sigma().iter().enumerate() {
        let l2 = l * l;
        if !(l > 0.0) {
            return Err(Error::AssumptionViolation(format!("lambda_{} = 0", i + 1)));
        }
        let theta = gamma * (l2 / n + delta);
        let mu = n * l * spec.alpha()[i] / (sqrt_beta * (l2 + n * delta));
        let a = gamma * l2 * l2 / (2.0 * n * b * (l2 + n * delta));
        coords.push(PearsonCoord::new(theta, mu, a)?);
    }
    Ok(PearsonParams::from_coords(&coords))
}

/// Euler–Maruyama path of hSGD in `x`-coordinates.
///
/// The diffusion matrix square root uses `sqrt(A^T A) = Q Sigma Q^T`, so a
/// step adds `gamma / (n sqrt(B)) * ||A X - b|| * Q Sigma Q^T dW`, scaled by
/// `diffusion_scale` (1 for hSGD, 0 for plain gradient flow).
pub fn simulate_hsgd<I: Increments + ?Sized>(
    ds: &Dataset,
    spec: &Spectrum,
    cfg: &OptimConfig,
    x0: &[f64],
    opts: EmOptions,
    diffusion_scale: f64,
    noise: &mut I,
) -> Result<SdePath> {
    if x0.len() != ds.d() || spec.d() != ds.d() {
        return Err(Error::DimensionMismatch { expected: ds.d(), found: x0.len() });
    }
    let n = ds.n() as f64;
    let coef = diffusion_scale * cfg.gamma / (n * (cfg.batch as f64).sqrt());
    let sqrt_hess = spec.q() * DMatrix::from_diagonal(&DVector::from_column_slice(spec.sigma())) * spec.q().transpose();
    let mut kick = DVector::zeros(ds.d());
    integrate(x0, opts, noise, |x, dw, h| {
        let grad = ds.gradient(x, cfg.delta);
        let resid_sq = (2.0 * ds.loss(x)).max(0.0);
        kick.gemv(1.0, &sqrt_hess, &DVector::from_column_slice(dw), 0.0);
        let scale = coef * resid_sq.sqrt();
        for j in 0..x.len() {
            x[j] += -cfg.gamma * grad[j] * h + scale * kick[j];
        }
    })
}

/// `z_i = lambda_i (Q^T (x - x*))_i / sqrt(beta)`.
pub fn x_to_z(spec: &Spectrum, x: &[f64]) -> Vec<f64> {
    let y = spec.q().transpose() * (DVector::from_column_slice(x) - spec.x_star());
    let sb = spec.beta().sqrt();
    y.iter().zip(spec.sigma()).map(|(y, l)| l * y / sb).collect()
}

/// Inverse of [`x_to_z`].
pub fn z_to_x(spec: &Spectrum, z: &[f64]) -> Vec<f64> {
    let sb = spec.beta().sqrt();
    let y = DVector::from_iterator(z.len(), z.iter().zip(spec.sigma()).map(|(z, l)| z * sb / l));
    (spec.q() * y + spec.x_star()).iter().copied().collect()
}

/// Maps a path in `x`-coordinates to the rescaled principal components.
pub fn transform_to_z(path: &SdePath, spec: &Spectrum) -> Result<SdePath> {
    if path.dim != spec.d() {
        return Err(Error::DimensionMismatch { expected: spec.d(), found: path.dim });
    }
    let mut states = Vec::with_capacity(path.states.len());
    for k in 0..path.len() {
        states.extend(x_to_z(spec, path.state(k)));
    }
    Ok(SdePath { states, ..path.clone() })
}

/// Coupled Euler–Maruyama for the rescaled system; every coordinate's
/// diffusion sees the shared `|Z|^2`.
pub fn simulate_z_system<I: Increments + ?Sized>(
    params: &PearsonParams,
    z0: &[f64],
    opts: EmOptions,
    noise: &mut I,
) -> Result<SdePath> {
    if z0.len() != params.dim() {
        return Err(Error::DimensionMismatch { expected: params.dim(), found: z0.len() });
    }
    let coords: Vec<PearsonCoord> = (0..params.dim()).map(|i| params.coord(i)).collect();
    integrate(z0, opts, noise, |z, dw, h| z_system_step(&coords, z, dw, h))
}

fn z_system_step(coords: &[PearsonCoord], z: &mut [f64], dw: &[f64], h: f64) {
    let s = 1.0 + z.iter().map(|v| v * v).sum::<f64>();
    for (i, c) in coords.iter().enumerate() {
        z[i] += -c.theta * (z[i] - c.mu) * h + c.diffusion_sq(s).sqrt() * dw[i];
    }
}

fn pearson_step(c: &PearsonCoord, z: &mut f64, dw: f64, h: f64) {
    let s = 1.0 + *z * *z;
    *z += -c.theta * (*z - c.mu) * h + c.diffusion_sq(s).sqrt() * dw;
}

/// Scalar Euler–Maruyama path of one decoupled Pearson diffusion.
pub fn simulate_pearson<I: Increments + ?Sized>(
    coord: &PearsonCoord,
    z0: f64,
    opts: EmOptions,
    noise: &mut I,
) -> Result<SdePath> {
    integrate(&[z0], opts, noise, |z, dw, h| pearson_step(coord, &mut z[0], dw[0], h))
}

/// Terminal values of `n_paths` independent Pearson paths; path `k` uses
/// stream `k` of `seed`.
pub fn pearson_terminal_samples(
    coord: &PearsonCoord,
    z0: f64,
    h: f64,
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let opts = EmOptions::terminal(h, horizon);
    (0..n_paths)
        .into_par_iter()
        .map(|k| {
            let mut noise = GaussianIncrements(stream_rng(seed, k as u64));
            simulate_pearson(coord, z0, opts, &mut noise).map(|p| p.final_state()[0])
        })
        .collect()
}

/// Un-normalized log-density of the stationary Pearson type IV law:
/// `-(nu+1)/2 log[1 + (u/sqrt(nu) + mu)^2] + mu (nu - 1) atan(u/sqrt(nu) + mu)`.
pub fn pearson_stationary_logpdf(u: f64, nu: f64, mu: f64) -> Result<f64> {
    if !(nu > 0.0) {
        return Err(Error::Domain(format!("nu = {nu} must be > 0")));
    }
    let w = u / nu.sqrt() + mu;
    Ok(-0.5 * (nu + 1.0) * w.mul_add(w, 1.0).ln() + mu * (nu - 1.0) * w.atan())
}

/// Conditional moments `E[Z_t^k | Z_0 = z0]` for `k = 0..=p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentOracle {
    pub time: f64,
    pub moments: Vec<f64>,
    /// `k >= nu`: the stationary moment is infinite, the finite-time value
    /// grows without bound in `t`.
    pub divergent: Vec<bool>,
}

/// Generator of the Pearson diffusion on polynomials of degree `<= p`, in
/// the basis `(1, z, .., z^p)`: column `k` holds the coefficients of
/// `L z^k = k(k-1) g1 z^{k-2} + k g0 z^{k-1} + k (g2 + (k-1) g3) z^k`
/// with `g0 = theta mu`, `g1 = g3 = theta a`, `g2 = -theta`.
pub fn moment_generator(coord: &PearsonCoord, p: usize) -> DMatrix<f64> {
    let g0 = coord.theta * coord.mu;
    let g1 = coord.theta * coord.a;
    let g2 = -coord.theta;
    let g3 = g1;
    let mut g = DMatrix::zeros(p + 1, p + 1);
    for k in 0..=p {
        let kf = k as f64;
        g[(k, k)] = kf * (g2 + (kf - 1.0) * g3);
        if k >= 1 {
            g[(k - 1, k)] = kf * g0;
        }
        if k >= 2 {
            g[(k - 2, k)] = kf * (kf - 1.0) * g1;
        }
    }
    g
}

/// Moments via `P(z0)^T exp(t G)` with `P(z) = (1, z, .., z^p)`.
pub fn pearson_moment_oracle(coord: &PearsonCoord, z0: f64, t: f64, p: usize) -> Result<MomentOracle> {
    if p > MAX_MOMENT_ORDER {
        return Err(Error::Refused(format!(
            "moment order {p} exceeds {MAX_MOMENT_ORDER}; the generator exponential is ill-conditioned"
        )));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("time t = {t} must be finite and >= 0")));
    }
    let e = expm(&(moment_generator(coord, p) * t))?;
    let powers: Vec<f64> = (0..=p).map(|j| z0.powi(j as i32)).collect();
    let moments = (0..=p)
        .map(|k| (0..=p).map(|j| powers[j] * e[(j, k)]).sum())
        .collect();
    let nu = coord.nu();
    Ok(MomentOracle { time: t, moments, divergent: (0..=p).map(|k| k as f64 >= nu).collect() })
}

/// Outcome of a coupled convex-order comparison for one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexOrderReport {
    pub coordinate: usize,
    /// `E[g(Z_t^i)]` for the coupled system.
    pub lhs: f64,
    /// `E[g(Zhat_t^i)]` for the decoupled diffusion.
    pub rhs: f64,
    pub lhs_se: f64,
    pub rhs_se: f64,
    /// Standard error of the paired difference.
    pub diff_se: f64,
    /// `lhs >= rhs - 3 * diff_se`.
    pub ordered: bool,
}

/// Runs `n_paths` coupled pairs (coupled system, decoupled coordinates) on
/// shared increments from `z0` to time `t` and compares `E[g(.)]` per
/// coordinate.
pub fn convex_order_check<G>(
    params: &PearsonParams,
    z0: &[f64],
    t: f64,
    h: f64,
    n_paths: usize,
    seed: u64,
    g: G,
) -> Result<Vec<ConvexOrderReport>>
where
    G: Fn(f64) -> f64 + Sync,
{
    let d = params.dim();
    if z0.len() != d {
        return Err(Error::DimensionMismatch { expected: d, found: z0.len() });
    }
    if n_paths < 2 {
        return Err(Error::Domain("need at least two paths".into()));
    }
    let opts = EmOptions::terminal(h, t);
    let (steps, h) = opts.grid()?;
    let coords: Vec<PearsonCoord> = (0..d).map(|i| params.coord(i)).collect();

    let pairs: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..n_paths)
        .into_par_iter()
        .map(|k| {
            let mut noise = GaussianIncrements(stream_rng(seed, k as u64));
            let mut z = z0.to_vec();
            let mut zhat = z0.to_vec();
            let mut dw = vec![0.0; d];
            for step in 1..=steps {
                noise.fill(h, &mut dw);
                z_system_step(&coords, &mut z, &dw, h);
                for i in 0..d {
                    pearson_step(&coords[i], &mut zhat[i], dw[i], h);
                }
                if z.iter().chain(&zhat).any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { step });
                }
            }
            Ok((z, zhat))
        })
        .collect();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = pairs.into_iter().collect::<Result<_>>()?;

    let nf = n_paths as f64;
    let mut out = Vec::with_capacity(d);
    for i in 0..d {
        let lhs: Vec<f64> = pairs.iter().map(|(z, _)| g(z[i])).collect();
        let rhs: Vec<f64> = pairs.iter().map(|(_, zh)| g(zh[i])).collect();
        let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
        let (lm, ls) = mean_se(&lhs);
        let (rm, rs) = mean_se(&rhs);
        let (_, ds) = mean_se(&diff);
        debug_assert!(nf >= 2.0);
        out.push(ConvexOrderReport {
            coordinate: i,
            lhs: lm,
            rhs: rm,
            lhs_se: ls,
            rhs_se: rs,
            diff_se: ds,
            ordered: lm >= rm - 3.0 * ds,
        });
    }
    Ok(out)
}

/// `convex_order_check` with `g(z) = |z|^p`.
pub fn convex_order_moment(
    params: &PearsonParams,
    z0: &[f64],
    t: f64,
    h: f64,
    p: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<ConvexOrderReport>> {
    if !(p >= 1.0) {
        return Err(Error::Domain(format!("moment order p = {p} must be >= 1")));
    }
    convex_order_check(params, z0, t, h, n_paths, seed, move |z: f64| z.abs().powf(p))
}

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
