use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::dataio::{spectral, Dataset};
use crate::diffusion::{
    build_pearson_params, convex_order_moment, mean_se, pearson_moment_oracle, pearson_terminal_samples, simulate_hsgd,
    simulate_z_system, transform_to_z, x_to_z, EmOptions, PearsonCoord, PearsonParams, ReplayIncrements,
};
use crate::rng::stream_rng;
use crate::sgd::{gradient_noise_covariance, minibatch_gradient, standard_normals, OptimConfig};
use crate::stats::{fit_stable_quantile, fit_t_mle, stable_sample_cms};
use crate::tails::{drift_condition_margin, drift_exponent, drift_q, eta_lower, eta_upper, gamma_bar, spectral_correction, wishart_expected_lambda1sq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyLevel {
    Fast,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub status: CheckStatus,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub level: VerifyLevel,
    pub checks: Vec<CheckResult>,
    pub passed: usize,
    pub failed: usize,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }
}

/// `(measured, tolerance, passed, detail)`; checks that error out report
/// a failure with the error as detail.
type Outcome = (f64, f64, bool, String);
type Check = (&'static str, fn() -> crate::Result<Outcome>);

const SEED: u64 = 0x7a11;

/// Runs the built-in property checks. `fast` stays within about a minute;
/// `full` adds the large Monte-Carlo checks.
pub fn verify_suite(level: VerifyLevel) -> VerifyReport {
    let mut checks: Vec<Check> = vec![
        ("table1_eta_upper", table1),
        ("gap_identity", gap_identity),
        ("covariance_enumeration", covariance_enumeration),
        ("drift_condition", drift_condition),
        ("moment_oracle_closed_form", moment_closed_form),
        ("hsgd_z_equivalence", hsgd_z_equivalence),
        ("wishart_top_eigenvalue", wishart),
        ("pearson_conditional_mean", pearson_conditional_mean),
        ("convex_order_1e4_paths", || convex_order(10_000)),
    ];
    if level == VerifyLevel::Full {
        checks.extend([
            ("convex_order_1e5_paths", (|| convex_order(100_000)) as fn() -> crate::Result<Outcome>),
            ("pearson_stationary_variance", pearson_stationary_variance),
            ("moment_oracle_vs_monte_carlo", moment_oracle_vs_mc),
            ("t_mle_recovery", t_mle_recovery),
            ("stable_fit_recovery", stable_fit_recovery),
        ]);
    }
    let checks: Vec<CheckResult> = checks
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let (measured, tolerance, ok, detail) = f().unwrap_or_else(|e| (f64::NAN, f64::NAN, false, e.to_string()));
            CheckResult {
                name: name.into(),
                status: if ok { CheckStatus::Pass } else { CheckStatus::Fail },
                measured,
                tolerance,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect();
    let passed = checks.iter().filter(|c| c.status == CheckStatus::Pass).count();
    VerifyReport { level, failed: checks.len() - passed, passed, checks }
}

fn table1() -> crate::Result<Outcome> {
    let rows = [(2000, 0.015, 319.83, 3.61), (1797, 0.100, 137.07, 2.91), (1797, 0.200, 93.49, 3.06)];
    let mut worst = 0.0f64;
    for (n, gamma, l1, want) in rows {
        worst = worst.max((eta_upper(n, 1, 0.0, gamma, l1)? - want).abs());
    }
    Ok((worst, 0.01, worst <= 0.01, "max |eta_upper - tabulated| over three rows".into()))
}

fn random_spectrum<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let mut l: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..60.0)).collect();
    l.sort_by(|a, b| b.total_cmp(a));
    l
}

fn gap_identity() -> crate::Result<Outcome> {
    let mut rng = stream_rng(SEED, 1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.random_range(1..40);
        let l = random_spectrum(&mut rng, len);
        let n = rng.random_range(10..5000);
        let batch = rng.random_range(1..8);
        let delta = rng.random_range(0.0..1.0);
        let gamma = rng.random_range(1e-3..0.5);
        let gap = eta_upper(n, batch, delta, gamma, l[0])? - eta_lower(n, batch, delta, gamma, &l)?;
        let want = spectral_correction(&l)?;
        worst = worst.max((gap - want).abs() / want.max(1.0));
    }
    Ok((worst, 1e-12, worst <= 1e-12, "100 random spectra".into()))
}

/// Brute-force covariance of the minibatch gradient over all `n^B` ordered
/// index tuples.
pub fn enumerated_covariance(ds: &Dataset, x: &[f64], batch: usize) -> crate::Result<DMatrix<f64>> {
    let (n, d) = (ds.n(), ds.d());
    let total = n.pow(batch as u32);
    let mut mean = DVector::zeros(d);
    let mut second = DMatrix::zeros(d, d);
    let mut idx = vec![0usize; batch];
    for code in 0..total {
        let mut c = code;
        for slot in idx.iter_mut() {
            *slot = c % n;
            c /= n;
        }
        let g = minibatch_gradient(ds, x, &idx, 0.0)?;
        mean += &g;
        second += &g * g.transpose();
    }
    mean /= total as f64;
    second /= total as f64;
    Ok(second - &mean * mean.transpose())
}

fn covariance_enumeration() -> crate::Result<Outcome> {
    let mut rng = stream_rng(SEED, 2);
    let mut worst = 0.0f64;
    let mut count = 0;
    for n in 1..=4 {
        for d in 1..=3 {
            for batch in 1..=3 {
                let a = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let b = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let ds = Dataset::new(a, b)?;
                let closed = gradient_noise_covariance(&ds, &x, batch)?;
                let brute = enumerated_covariance(&ds, &x, batch)?;
                worst = worst.max((closed - brute).amax());
                count += 1;
            }
        }
    }
    Ok((worst, 1e-12, worst <= 1e-12, format!("{count} instances with n <= 4, d <= 3, B <= 3")))
}

fn drift_condition() -> crate::Result<Outcome> {
    let mut rng = stream_rng(SEED, 3);
    let mut worst = 0.0f64;
    let mut min_inf = f64::INFINITY;
    for _ in 0..50 {
        let len = rng.random_range(2..12);
        let l = random_spectrum(&mut rng, len);
        let n = rng.random_range(50..3000);
        let batch = rng.random_range(1..5);
        let delta = rng.random_range(0.0..0.5);
        let gamma = gamma_bar(n, batch, delta, &l)? * rng.random_range(0.05..0.9);
        let theta = drift_exponent(n, batch, delta, gamma, &l)?;
        let trace: f64 = l.iter().map(|v| v * v).sum();
        let q = drift_q(l[0] * l[0], theta, n, batch, delta, gamma, trace);
        let scale = 2.0 * (n * batch) as f64 * (l[0] * l[0] + n as f64 * delta) / gamma;
        worst = worst.max(q.abs() / scale);
        if theta - 0.05 > 2.0 {
            for k in 0..=20 {
                let rho = 2.0 + (theta - 0.05 - 2.0) * k as f64 / 20.0;
                let m = drift_condition_margin(&l, n, batch, delta, gamma, rho)?;
                min_inf = min_inf.min(m.inf_q);
            }
        }
    }
    let ok = worst <= 1e-9 && min_inf > 0.0;
    Ok((worst, 1e-9, ok, format!("relative |q(lambda_1^2, theta)| over 50 instances; min inf q on rho grid = {min_inf:.3e}")))
}

fn moment_closed_form() -> crate::Result<Outcome> {
    let mut worst = 0.0f64;
    for (theta, mu, a, z0) in [(0.7, 0.4, 0.2, 1.5), (2.0, -0.3, 0.1, -1.0), (0.3, 0.0, 0.3, 0.2)] {
        let c = PearsonCoord::new(theta, mu, a)?;
        for t in [0.1, 1.0, 5.0] {
            let m = pearson_moment_oracle(&c, z0, t, 2)?;
            let e = (-theta * t).exp();
            let mean = mu + (z0 - mu) * e;
            worst = worst.max((m.moments[1] - mean).abs());
        }
        let m = pearson_moment_oracle(&c, z0, 200.0 / theta, 2)?;
        // Stationary second moment: (a + mu^2)/(1 - a).
        worst = worst.max((m.moments[2] - (a + mu * mu) / (1.0 - a)).abs());
    }
    Ok((worst, 1e-9, worst <= 1e-9, "conditional mean and stationary second moment".into()))
}

fn hsgd_z_equivalence() -> crate::Result<Outcome> {
    let mut rng = stream_rng(SEED, 4);
    let (n, d) = (40, 3);
    let a = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let b = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let ds = Dataset::new(a, b)?;
    let spec = spectral(&ds, 0.1)?;
    let cfg = OptimConfig { gamma: 0.05, delta: 0.1, batch: 2, iterations: 1, seed: 0, replicas: 1 };
    let params = build_pearson_params(&spec, &cfg)?;
    let (h, horizon, steps) = (0.05, 5.0, 100);
    let mut dw = vec![0.0; d * steps];
    standard_normals(&mut rng, &mut dw);
    dw.iter_mut().for_each(|v| *v *= f64::sqrt(h));
    let rotated: Vec<f64> = dw.chunks(d).flat_map(|c| (spec.q().transpose() * DVector::from_column_slice(c)).iter().copied().collect::<Vec<_>>()).collect();
    let x0 = [1.0, -2.0, 0.5];
    let xpath = simulate_hsgd(&ds, &spec, &cfg, &x0, EmOptions::new(h, horizon), 1.0, &mut ReplayIncrements::new(&dw))?;
    let via_x = transform_to_z(&xpath, &spec)?;
    let direct = simulate_z_system(&params, &x_to_z(&spec, &x0), EmOptions::new(h, horizon), &mut ReplayIncrements::new(&rotated))?;
    let scale = direct.states.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let resid = via_x.states.iter().zip(&direct.states).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
    Ok((resid, 1e-8, resid <= 1e-8, "hSGD mapped to Z vs Z-system on matched increments".into()))
}

/// Mean top eigenvalue of `G^T G` over `draws` Gaussian `n x d` matrices.
pub fn wishart_mc_top_eigenvalue(n: usize, d: usize, sigma2: f64, draws: usize, seed: u64) -> f64 {
    let sd = sigma2.sqrt();
    let total: f64 = (0..draws)
        .map(|k| {
            let mut rng = stream_rng(seed, k as u64);
            let g = DMatrix::from_fn(n, d, |_, _| sd * rng.sample::<f64, _>(StandardNormal));
            SymmetricEigen::new(g.transpose() * g).eigenvalues.max()
        })
        .sum();
    total / draws as f64
}

fn wishart() -> crate::Result<Outcome> {
    let mc = wishart_mc_top_eigenvalue(400, 40, 1.0, 50, SEED);
    let want = wishart_expected_lambda1sq(400, 40, 1.0)?;
    let rel = (mc / want - 1.0).abs();
    Ok((rel, 0.03, rel <= 0.03, format!("MC {mc:.2} vs formula {want:.2}")))
}

fn pearson_conditional_mean() -> crate::Result<Outcome> {
    let c = PearsonCoord::new(1.0, 0.3, 0.2)?;
    let z0 = 2.0;
    let mut worst = 0.0f64;
    for (k, t) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        let s = pearson_terminal_samples(&c, z0, 1e-3, t, 20_000, SEED + k as u64)?;
        let (m, se) = mean_se(&s);
        let want = c.mu + (z0 - c.mu) * (-c.theta * t).exp();
        worst = worst.max((m - want).abs() / se);
    }
    Ok((worst, 4.0, worst <= 4.0, "max |mean - closed form| in standard errors, three horizons".into()))
}

fn convex_order(paths: usize) -> crate::Result<Outcome> {
    let coords = [PearsonCoord::new(1.0, 0.1, 0.1)?, PearsonCoord::new(0.6, -0.2, 0.08)?, PearsonCoord::new(0.3, 0.0, 0.05)?];
    let params = PearsonParams::from_coords(&coords);
    let z0 = [0.5, -0.5, 1.0];
    let mut worst = f64::INFINITY;
    let mut all = true;
    for (i, t) in [0.5, 2.0].into_iter().enumerate() {
        for p in [1.0, 2.0, 3.0] {
            for r in convex_order_moment(&params, &z0, t, 0.01, p, paths, SEED + 10 * i as u64 + p as u64)? {
                all &= r.ordered;
                worst = worst.min((r.lhs - r.rhs) / r.diff_se.max(f64::MIN_POSITIVE));
            }
        }
    }
    Ok((worst, -3.0, all, "min (lhs - rhs)/SE over d = 3, p in {1,2,3}, two horizons".into()))
}

fn pearson_stationary_variance() -> crate::Result<Outcome> {
    let nu = 6.0;
    let c = PearsonCoord::from_nu(1.0, 0.0, nu)?;
    let s = pearson_terminal_samples(&c, 0.0, 0.01, 10.0, 50_000, SEED + 20)?;
    let u: Vec<f64> = s.iter().map(|z| nu.sqrt() * z).collect();
    let n = u.len() as f64;
    let m = u.iter().sum::<f64>() / n;
    let var = u.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    let rel = (var / (nu / (nu - 2.0)) - 1.0).abs();
    Ok((rel, 0.05, rel <= 0.05, format!("Var(sqrt(nu) Z) = {var:.4}, target {:.4}", nu / (nu - 2.0))))
}

fn moment_oracle_vs_mc() -> crate::Result<Outcome> {
    let mut worst = 0.0f64;
    let z0 = 1.0;
    let mut k = 0;
    for nu in [5.0, 8.0, 12.0] {
        let c = PearsonCoord::from_nu(1.0, 0.2, nu)?;
        for t in [0.5, 1.0, 2.0] {
            let oracle = pearson_moment_oracle(&c, z0, t, 2)?;
            let s = pearson_terminal_samples(&c, z0, 1e-3, t, 20_000, SEED + 100 + k)?;
            k += 1;
            let (m1, se1) = mean_se(&s);
            let sq: Vec<f64> = s.iter().map(|v| v * v).collect();
            let (m2, se2) = mean_se(&sq);
            worst = worst.max((m1 - oracle.moments[1]).abs() / se1).max((m2 - oracle.moments[2]).abs() / se2);
        }
    }
    Ok((worst, 4.0, worst <= 4.0, "max deviation in standard errors, k = 1, 2 over 9 (t, nu)".into()))
}

fn t_mle_recovery() -> crate::Result<Outcome> {
    let t = StudentT::new(5.0).map_err(|e| crate::Error::Domain(e.to_string()))?;
    let mut rng = stream_rng(SEED, 30);
    let s: Vec<f64> = (0..100_000).map(|_| 2.0 * t.sample(&mut rng)).collect();
    let (nu, kappa) = fit_t_mle(&s)?.t_params().expect("t fit");
    let rel = ((nu - 5.0).abs() / 5.0).max((kappa - 2.0).abs() / 2.0);
    Ok((rel, 0.1, rel <= 0.1, format!("nu = {nu:.3}, kappa = {kappa:.4}")))
}

fn stable_fit_recovery() -> crate::Result<Outcome> {
    let s = stable_sample_cms(1.5, 0.0, 1.0, 0.0, 100_000, &mut stream_rng(SEED, 31))?;
    let (alpha, ..) = fit_stable_quantile(&s)?.stable_params().expect("stable fit");
    let err = (alpha - 1.5).abs();
    Ok((err, 0.1, err <= 0.1, format!("alpha = {alpha:.4}")))
}
