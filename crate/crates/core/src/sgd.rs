//! Minibatch SGD on the ridge objective and the replica-ensemble protocol.
//!
//! Batches are `B` i.i.d. uniform draws from `{0, .., n-1}` with
//! replacement, so the per-index counts are multinomial.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{axpy, dot, Dataset, Spectrum};
use crate::rng::{mix_seed, rng_from_seed};
use crate::{Error, Result};

/// SGD and hSGD meta-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub gamma: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(rename = "B", alias = "batch")]
    pub batch: usize,
    #[serde(rename = "K", alias = "iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
}

fn default_replicas() -> usize {
    1000
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma = {} must be finite and >= 0", self.gamma)));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta = {} must be finite and >= 0", self.delta)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size B must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iteration count K must be >= 1".into()));
        }
        if self.replicas == 0 {
            return Err(Error::Config("replicas must be >= 1".into()));
        }
        Ok(())
    }
}

/// `B` i.i.d. uniform indices in `0..n`, with replacement.
pub fn sample_batch<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    let mut out = vec![0; batch];
    fill_batch(n, rng, &mut out);
    out
}

fn fill_batch<R: Rng + ?Sized>(n: usize, rng: &mut R, out: &mut [usize]) {
    for slot in out.iter_mut() {
        *slot = rng.random_range(0..n);
    }
}

/// `(1/B) sum_{i in batch} (a_i . x - b_i) a_i + delta x`, counting
/// repeated indices with multiplicity.
pub fn minibatch_gradient(ds: &Dataset, x: &[f64], batch: &[usize], delta: f64) -> Result<DVector<f64>> {
    if x.len() != ds.d() {
        return Err(Error::DimensionMismatch { expected: ds.d(), found: x.len() });
    }
    if let Some(&bad) = batch.iter().find(|&&i| i >= ds.n()) {
        return Err(Error::Domain(format!("batch index {bad} out of range 0..{}", ds.n())));
    }
    let mut g = DVector::zeros(ds.d());
    accumulate_batch_gradient(ds, x, batch, delta, g.as_mut_slice());
    Ok(g)
}

fn accumulate_batch_gradient(ds: &Dataset, x: &[f64], batch: &[usize], delta: f64, g: &mut [f64]) {
    g.iter_mut().zip(x).for_each(|(gj, xj)| *gj = delta * xj);
    let w = 1.0 / batch.len() as f64;
    for &i in batch {
        let r = ds.residual(i, x);
        axpy(w * r, ds.row(i), g);
    }
}

/// Per-run switches for [`sgd_run`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    pub record_trajectory: bool,
    /// Abort once `||x_k||` exceeds this bound.
    pub divergence_guard: Option<f64>,
    /// Use the exact full gradient instead of sampled batches.
    pub full_batch: bool,
}

impl RunOptions {
    pub fn guarded() -> Self {
        Self { divergence_guard: Some(1e12), ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct SgdOutcome {
    pub x_final: DVector<f64>,
    /// `x_0, .., x_K` when recording was requested.
    pub trajectory: Option<Vec<DVector<f64>>>,
}

/// `K` steps of `x_{k+1} = x_k - gamma * grad f_{Omega_k}(x_k)`.
pub fn sgd_run<R: Rng + ?Sized>(
    ds: &Dataset,
    cfg: &OptimConfig,
    x0: &[f64],
    rng: &mut R,
    opts: RunOptions,
) -> Result<SgdOutcome> {
    cfg.validate()?;
    if x0.len() != ds.d() {
        return Err(Error::DimensionMismatch { expected: ds.d(), found: x0.len() });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("initial point is not finite".into()));
    }
    let mut x = x0.to_vec();
    let mut g = vec![0.0; ds.d()];
    let mut batch = vec![0usize; cfg.batch];
    let mut trajectory = opts.record_trajectory.then(|| vec![DVector::from_column_slice(&x)]);

    for k in 0..cfg.iterations {
        if opts.full_batch {
            g.copy_from_slice(ds.gradient(&x, cfg.delta).as_slice());
        } else {
            fill_batch(ds.n(), rng, &mut batch);
            accumulate_batch_gradient(ds, &x, &batch, cfg.delta, &mut g);
        }
        axpy(-cfg.gamma, &g, &mut x);
        if let Some(bound) = opts.divergence_guard {
            let norm = dot(&x, &x).sqrt();
            if !(norm <= bound) {
                return Err(Error::Divergence { step: k + 1, norm });
            }
        }
        if let Some(t) = trajectory.as_mut() {
            t.push(DVector::from_column_slice(&x));
        }
    }
    Ok(SgdOutcome { x_final: DVector::from_vec(x), trajectory })
}

/// Closed-form covariance of the minibatch gradient noise at `x`:
/// `(1/B) [ (1/n) sum_i g_i g_i^T - (1/n^2) G G^T ]` with
/// `g_i = (a_i . x - b_i) a_i` and `G = sum_i g_i`.
pub fn gradient_noise_covariance(ds: &Dataset, x: &[f64], batch: usize) -> Result<DMatrix<f64>> {
    if x.len() != ds.d() {
        return Err(Error::DimensionMismatch { expected: ds.d(), found: x.len() });
    }
    if batch == 0 {
        return Err(Error::Domain("batch size must be >= 1".into()));
    }
    let (n, d) = (ds.n(), ds.d());
    let mut second = DMatrix::zeros(d, d);
    let mut total = DVector::zeros(d);
    for i in 0..n {
        let gi = DVector::from_column_slice(ds.row(i)) * ds.residual(i, x);
        second.ger(1.0, &gi, &gi, 1.0);
        total += &gi;
    }
    let nf = n as f64;
    let mut c = second / nf;
    c.ger(-1.0 / (nf * nf), &total, &total, 1.0);
    Ok(c / batch as f64)
}

/// Distribution of the initial points of ensemble replicas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSampler {
    Zero,
    Gaussian { sigma: f64 },
    Uniform { half_width: f64 },
}

impl Default for InitSampler {
    fn default() -> Self {
        InitSampler::Gaussian { sigma: 1.0 }
    }
}

impl InitSampler {
    pub fn sample<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> Result<Vec<f64>> {
        Ok(match *self {
            InitSampler::Zero => vec![0.0; d],
            InitSampler::Gaussian { sigma } => {
                let normal = Normal::new(0.0, sigma)
                    .map_err(|e| Error::Config(format!("init sigma {sigma}: {e}")))?;
                (0..d).map(|_| normal.sample(rng)).collect()
            }
            InitSampler::Uniform { half_width } => {
                if !(half_width > 0.0) {
                    return Err(Error::Config(format!("init half_width {half_width} must be > 0")));
                }
                let u = Uniform::new(-half_width, half_width)
                    .map_err(|e| Error::Config(format!("init half_width {half_width}: {e}")))?;
                (0..d).map(|_| u.sample(rng)).collect()
            }
        })
    }
}

/// Seed of replica `r`: both its initial point and its batch stream come
/// from this generator.
pub fn replica_seed(seed: u64, replica: usize) -> u64 {
    mix_seed(seed, replica as u64)
}

/// Final iterates of `R` independent SGD runs.
#[derive(Debug, Clone)]
pub struct Ensemble {
    /// `R x d`, one final iterate per row.
    pub finals: DMatrix<f64>,
    /// `y_r = q_1^T x_K^{(r)}`.
    pub projected: Vec<f64>,
    pub config: OptimConfig,
    pub init: InitSampler,
    pub dataset_digest: String,
    /// Replicas whose final iterate is not finite or that tripped the guard.
    pub divergent: Vec<usize>,
}

/// Runs `cfg.replicas` independent SGD runs in parallel. Results are merged
/// by replica index, so the output does not depend on scheduling.
pub fn run_ensemble(
    ds: &Dataset,
    spec: &Spectrum,
    cfg: &OptimConfig,
    init: InitSampler,
    opts: RunOptions,
) -> Result<Ensemble> {
    cfg.validate()?;
    if spec.d() != ds.d() {
        return Err(Error::DimensionMismatch { expected: ds.d(), found: spec.d() });
    }
    let d = ds.d();
    let opts = RunOptions { record_trajectory: false, ..opts };
    let runs: Vec<Result<Option<Vec<f64>>>> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_from_seed(replica_seed(cfg.seed, r));
            let x0 = init.sample(d, &mut rng)?;
            match sgd_run(ds, cfg, &x0, &mut rng, opts) {
                Ok(out) => Ok(Some(out.x_final.as_slice().to_vec())),
                Err(Error::Divergence { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut finals = DMatrix::from_element(cfg.replicas, d, f64::NAN);
    let mut divergent = Vec::new();
    for (r, run) in runs.into_iter().enumerate() {
        match run? {
            Some(x) if x.iter().all(|v| v.is_finite()) => {
                finals.row_mut(r).copy_from_slice(&x);
            }
            Some(x) => {
                finals.row_mut(r).copy_from_slice(&x);
                divergent.push(r);
            }
            None => divergent.push(r),
        }
    }
    let q1 = spec.q1();
    let projected = (0..cfg.replicas).map(|r| finals.row(r).transpose().dot(&q1)).collect();
    Ok(Ensemble {
        finals,
        projected,
        config: *cfg,
        init,
        dataset_digest: ds.digest(),
        divergent,
    })
}

/// Projections on the dominant singular direction and their centred version.
#[derive(Debug, Clone)]
pub struct Projection {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub mean: f64,
}

/// `y_r = q_1^T x_K^{(r)}` and `z = y - mean(y)`, skipping divergent rows.
pub fn project_dominant(ensemble: &Ensemble, spec: &Spectrum) -> Result<Projection> {
    if ensemble.finals.ncols() != spec.d() {
        return Err(Error::DimensionMismatch { expected: spec.d(), found: ensemble.finals.ncols() });
    }
    let q1 = spec.q1();
    let y: Vec<f64> = (0..ensemble.finals.nrows())
        .filter(|r| !ensemble.divergent.contains(r))
        .map(|r| ensemble.finals.row(r).transpose().dot(&q1))
        .collect();
    if y.is_empty() {
        return Err(Error::DegenerateInput("every replica diverged".into()));
    }
    let (z, mean) = center(&y);
    Ok(Projection { y, z, mean })
}

pub fn center(y: &[f64]) -> (Vec<f64>, f64) {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let z = y.iter().map(|v| v - mean).collect();
    (z, mean)
}

/// JSON sidecar accompanying `ensemble.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleSidecar {
    pub config: OptimConfig,
    pub init: InitSampler,
    pub dataset_digest: String,
    pub divergent_replicas: Vec<usize>,
    pub seeding: String,
}

impl Ensemble {
    /// CSV with header `replica,y,z`; divergent replicas are omitted.
    pub fn to_csv(&self, proj: &Projection) -> String {
        let mut out = String::from("replica,y,z\n");
        let kept = (0..self.finals.nrows()).filter(|r| !self.divergent.contains(r));
        for (r, (y, z)) in kept.zip(proj.y.iter().zip(&proj.z)) {
            out.push_str(&format!("{r},{y:e},{z:e}\n"));
        }
        out
    }

    pub fn sidecar(&self) -> EnsembleSidecar {
        EnsembleSidecar {
            config: self.config,
            init: self.init,
            dataset_digest: self.dataset_digest.clone(),
            divergent_replicas: self.divergent.clone(),
            seeding: "replica r uses mix_seed(seed, r) for both its initial point and its batch draws".into(),
        }
    }

    pub fn export(&self, proj: &Projection, csv_path: &Path, json_path: &Path) -> Result<()> {
        fs::write(csv_path, self.to_csv(proj))?;
        fs::write(json_path, serde_json::to_string_pretty(&self.sidecar())?)?;
        Ok(())
    }
}

/// Draws a standard normal vector; shared by the SDE simulators.
pub(crate) fn standard_normals<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_gaussian_synthetic, spectral};
    use crate::rng::rng_from_seed;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn small_dataset(n: usize, d: usize, seed: u64) -> Dataset {
        let raw = gen_gaussian_synthetic(n, d, seed).unwrap();
        Dataset::from_raw(&raw.x, &raw.b, false).unwrap()
    }

    fn cfg(gamma: f64, batch: usize, iterations: usize) -> OptimConfig {
        OptimConfig { gamma, delta: 0.0, batch, iterations, seed: 1, replicas: 1 }
    }

    #[test]
    fn batch_of_single_element_population() {
        let mut rng = rng_from_seed(0);
        assert_eq!(sample_batch(1, 3, &mut rng), vec![0, 0, 0]);
    }

    #[test]
    fn batch_frequencies_are_uniform() {
        let mut rng = rng_from_seed(5);
        let draws = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            counts[sample_batch(10, 1, &mut rng)[0]] += 1;
        }
        let p = 0.1;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn multinomial_count_moments() {
        // E[s_i] = B/n, E[s_i s_j] = B(B-1)/n^2 (i != j).
        let (n, b, trials) = (5usize, 3usize, 200_000usize);
        let mut rng = rng_from_seed(8);
        let (mut s0, mut s0s1) = (Vec::with_capacity(trials), Vec::with_capacity(trials));
        for _ in 0..trials {
            let batch = sample_batch(n, b, &mut rng);
            let c0 = batch.iter().filter(|&&i| i == 0).count() as f64;
            let c1 = batch.iter().filter(|&&i| i == 1).count() as f64;
            s0.push(c0);
            s0s1.push(c0 * c1);
        }
        for (xs, want) in [(&s0, b as f64 / n as f64), (&s0s1, (b * (b - 1)) as f64 / (n * n) as f64)] {
            let m = xs.iter().sum::<f64>() / trials as f64;
            let var = xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (trials as f64 - 1.0);
            let se = (var / trials as f64).sqrt();
            assert!((m - want).abs() < 3.0 * se, "mean {m} want {want} se {se}");
        }
    }

    #[test]
    fn gradient_hand_value() {
        let ds = Dataset::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), DVector::from_vec(vec![1.0])).unwrap();
        let g = minibatch_gradient(&ds, &[0.0, 0.0], &[0], 0.0).unwrap();
        assert_eq!(g.as_slice(), &[-1.0, 0.0]);
    }

    #[test]
    fn full_batch_gradient_vanishes_at_minimizer() {
        let ds = small_dataset(40, 4, 3);
        let spec = spectral(&ds, 0.0).unwrap();
        let all: Vec<usize> = (0..40).collect();
        let g = minibatch_gradient(&ds, spec.x_star().as_slice(), &all, 0.0).unwrap();
        assert!(g.amax() < 1e-10, "{}", g.amax());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ds = small_dataset(30, 5, 4);
        let mut rng = rng_from_seed(2);
        let batch = sample_batch(30, 7, &mut rng);
        let x: Vec<f64> = (0..5).map(|i| 0.3 * i as f64 - 0.7).collect();
        let delta = 0.2;
        let batch_loss = |x: &[f64]| {
            let l: f64 = batch.iter().map(|&i| 0.5 * ds.residual(i, x).powi(2)).sum::<f64>() / batch.len() as f64;
            l + 0.5 * delta * dot(x, x)
        };
        let g = minibatch_gradient(&ds, &x, &batch, delta).unwrap();
        for j in 0..5 {
            let h = 1e-5;
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[j] += h;
            xm[j] -= h;
            let fd = (batch_loss(&xp) - batch_loss(&xm)) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1.0), "{j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn gradient_rejects_bad_indices() {
        let ds = small_dataset(10, 2, 1);
        assert!(minibatch_gradient(&ds, &[0.0, 0.0], &[10], 0.0).is_err());
        assert!(minibatch_gradient(&ds, &[0.0], &[0], 0.0).is_err());
    }

    #[test]
    fn zero_step_keeps_initial_point() {
        let ds = small_dataset(20, 3, 1);
        let x0 = [0.5, -1.0, 2.0];
        let out = sgd_run(&ds, &cfg(0.0, 2, 50), &x0, &mut rng_from_seed(1), RunOptions::default()).unwrap();
        assert_eq!(out.x_final.as_slice(), &x0);
    }

    #[test]
    fn one_step_hand_evaluation() {
        let ds = small_dataset(20, 3, 1);
        let x0 = [0.5, -1.0, 2.0];
        let c = OptimConfig { delta: 0.3, ..cfg(0.05, 1, 1) };
        let mut probe = rng_from_seed(9);
        let i = sample_batch(20, 1, &mut probe)[0];
        let out = sgd_run(&ds, &c, &x0, &mut rng_from_seed(9), RunOptions::default()).unwrap();
        let r = ds.residual(i, &x0);
        for (j, &xj) in x0.iter().enumerate() {
            let want = xj - 0.05 * (r * ds.row(i)[j] + 0.3 * xj);
            assert!((out.x_final[j] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn full_batch_contracts_geometrically() {
        let ds = small_dataset(200, 6, 2);
        let spec = spectral(&ds, 0.1).unwrap();
        let delta = 0.1;
        let lmax = spec.lambda1().powi(2) / 200.0 + delta;
        let lmin = spec.sigma()[5].powi(2) / 200.0 + delta;
        let gamma = 1.0 / lmax;
        let c = OptimConfig { delta, ..cfg(gamma, 1, 60) };
        let opts = RunOptions { record_trajectory: true, full_batch: true, ..RunOptions::guarded() };
        let out = sgd_run(&ds, &c, &[3.0; 6], &mut rng_from_seed(0), opts).unwrap();
        let ridge = ds.ridge_solution(delta).unwrap();
        let errs: Vec<f64> = out.trajectory.unwrap().iter().map(|x| (x - &ridge).norm()).collect();
        assert!(errs.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        let rate = (1.0 - gamma * lmin).abs().max((1.0 - gamma * lmax).abs());
        for (k, e) in errs.iter().enumerate() {
            assert!(*e <= errs[0] * rate.powi(k as i32) * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn divergence_guard_reports_step() {
        let ds = small_dataset(50, 3, 2);
        let c = cfg(10.0, 1, 500);
        match sgd_run(&ds, &c, &[1.0; 3], &mut rng_from_seed(0), RunOptions::guarded()) {
            Err(Error::Divergence { step, norm }) => assert!(step >= 1 && norm > 1e12),
            other => panic!("{other:?}"),
        }
    }

    fn enumerate_covariance(ds: &Dataset, x: &[f64], batch: usize) -> DMatrix<f64> {
        let (n, d) = (ds.n(), ds.d());
        let full = ds.gradient(x, 0.0);
        let total = n.pow(batch as u32);
        let mut c = DMatrix::zeros(d, d);
        for code in 0..total {
            let mut idx = Vec::with_capacity(batch);
            let mut rem = code;
            for _ in 0..batch {
                idx.push(rem % n);
                rem /= n;
            }
            let e = minibatch_gradient(ds, x, &idx, 0.0).unwrap() - &full;
            c.ger(1.0 / total as f64, &e, &e, 1.0);
        }
        c
    }

    #[test]
    fn covariance_single_point_is_zero() {
        let ds = Dataset::new(DMatrix::from_row_slice(1, 2, &[0.3, 0.9]), DVector::from_vec(vec![2.0])).unwrap();
        let c = gradient_noise_covariance(&ds, &[1.0, -1.0], 3).unwrap();
        assert!(c.amax() < 1e-15);
    }

    #[test]
    fn covariance_matches_enumeration_n3_d2_b2() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.25, 2.0, 0.75, -1.0]);
        let ds = Dataset::new(a, DVector::from_vec(vec![0.5, -1.0, 2.0])).unwrap();
        let x = [0.3, -0.6];
        let closed = gradient_noise_covariance(&ds, &x, 2).unwrap();
        let brute = enumerate_covariance(&ds, &x, 2);
        assert!((closed - brute).amax() < 1e-12);
    }

    #[test]
    fn covariance_scales_inversely_with_batch() {
        let ds = small_dataset(25, 3, 6);
        let x = [0.1, 0.2, -0.3];
        let c1 = gradient_noise_covariance(&ds, &x, 1).unwrap();
        let c4 = gradient_noise_covariance(&ds, &x, 4).unwrap();
        assert!((c1 / 4.0 - c4).amax() <= 1e-15 * 4.0);
    }

    #[test]
    fn batch_gradient_is_unbiased() {
        let ds = small_dataset(15, 3, 7);
        let x = [0.4, -0.2, 0.9];
        let full = ds.gradient(&x, 0.1);
        let mut rng = rng_from_seed(12);
        let draws = 100_000;
        let mut sum = DVector::zeros(3);
        let mut sq = DVector::zeros(3);
        for _ in 0..draws {
            let g = minibatch_gradient(&ds, &x, &sample_batch(15, 2, &mut rng), 0.1).unwrap();
            sq += g.component_mul(&g);
            sum += g;
        }
        let mean = &sum / draws as f64;
        for j in 0..3 {
            let var = sq[j] / draws as f64 - mean[j].powi(2);
            let se = (var / draws as f64).sqrt();
            assert!((mean[j] - full[j]).abs() < 4.0 * se);
        }
    }

    #[test]
    fn ensemble_singleton_matches_direct_run() {
        let ds = small_dataset(60, 4, 3);
        let spec = spectral(&ds, 0.0).unwrap();
        let c = OptimConfig { replicas: 1, seed: 77, ..cfg(0.01, 2, 30) };
        let ens = run_ensemble(&ds, &spec, &c, InitSampler::default(), RunOptions::default()).unwrap();
        let mut rng = rng_from_seed(replica_seed(77, 0));
        let x0 = InitSampler::default().sample(4, &mut rng).unwrap();
        let direct = sgd_run(&ds, &c, &x0, &mut rng, RunOptions::default()).unwrap();
        assert_eq!(ens.finals.row(0).transpose(), direct.x_final);
        let y = direct.x_final.dot(&spec.q1());
        assert!((ens.projected[0] - y).abs() <= 1e-12);
    }

    #[test]
    fn ensemble_is_reproducible_and_projection_consistent() {
        let ds = small_dataset(60, 4, 3);
        let spec = spectral(&ds, 0.0).unwrap();
        let c = OptimConfig { replicas: 16, seed: 5, ..cfg(0.01, 1, 40) };
        let a = run_ensemble(&ds, &spec, &c, InitSampler::default(), RunOptions::default()).unwrap();
        let b = run_ensemble(&ds, &spec, &c, InitSampler::default(), RunOptions::default()).unwrap();
        assert_eq!(a.finals, b.finals);
        for r in 0..16 {
            let y = a.finals.row(r).transpose().dot(&spec.q1());
            assert!((a.projected[r] - y).abs() <= 1e-12);
        }
        // Each replica depends only on (seed, r): replicas 0..8 of a 16-run
        // ensemble equal an 8-run ensemble.
        let small = run_ensemble(&ds, &spec, &OptimConfig { replicas: 8, ..c }, InitSampler::default(), RunOptions::default()).unwrap();
        assert_eq!(small.finals, a.finals.rows(0, 8).into_owned());
    }

    #[test]
    fn ensemble_flags_divergent_rows() {
        let ds = small_dataset(30, 3, 3);
        let spec = spectral(&ds, 0.0).unwrap();
        let c = OptimConfig { replicas: 4, ..cfg(50.0, 1, 200) };
        let ens = run_ensemble(&ds, &spec, &c, InitSampler::default(), RunOptions::guarded()).unwrap();
        assert_eq!(ens.divergent, vec![0, 1, 2, 3]);
        assert!(project_dominant(&ens, &spec).is_err());
    }

    #[test]
    fn projection_unit_and_orthogonal() {
        let ds = small_dataset(40, 3, 1);
        let spec = spectral(&ds, 0.0).unwrap();
        let q1 = spec.q1().into_owned();
        let q2 = spec.q().column(1).into_owned();
        let mut finals = DMatrix::zeros(2, 3);
        finals.set_row(0, &q1.transpose());
        finals.set_row(1, &q2.transpose());
        let ens = Ensemble {
            finals,
            projected: vec![],
            config: cfg(0.1, 1, 1),
            init: InitSampler::Zero,
            dataset_digest: String::new(),
            divergent: vec![],
        };
        let p = project_dominant(&ens, &spec).unwrap();
        assert!((p.y[0] - 1.0).abs() < 1e-12);
        assert!(p.y[1].abs() < 1e-12);
        assert!(p.z.iter().sum::<f64>().abs() < 1e-12);
        let csv = ens.to_csv(&p);
        assert!(csv.starts_with("replica,y,z\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0.1, 0, 1).validate().is_err());
        assert!(cfg(0.1, 1, 0).validate().is_err());
        assert!(cfg(-0.1, 1, 1).validate().is_err());
        assert!(OptimConfig { replicas: 0, ..cfg(0.1, 1, 1) }.validate().is_err());
        let json = r#"{"gamma":0.015,"B":1,"K":1000}"#;
        let c: OptimConfig = serde_json::from_str(json).unwrap();
        assert_eq!((c.batch, c.iterations, c.replicas, c.delta), (1, 1000, 1000, 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn covariance_matches_enumeration(n in 1usize..=4, d in 1usize..=3, batch in 1usize..=3, seed in 0u64..1000) {
            let mut rng = rng_from_seed(seed);
            let a = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
            let b = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ds = Dataset::new(a, b).unwrap();
            let closed = gradient_noise_covariance(&ds, &x, batch).unwrap();
            let brute = enumerate_covariance(&ds, &x, batch);
            prop_assert!((closed - brute).amax() < 1e-12);
        }
    }
}
