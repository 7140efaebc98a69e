//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails. Optional positional arguments filter
//! criteria by substring.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};

use tailbench::dataio::{gen_gaussian_synthetic, spectral, Dataset};
use tailbench::diffusion::{
    build_pearson_params, convex_order_moment, mean_se, pearson_moment_oracle, pearson_terminal_samples, PearsonCoord,
};
use tailbench::experiment::{run_experiment, run_sweep, ExperimentConfig, RunSummary, SweepParameter, SweepSpec};
use tailbench::sgd::{gradient_noise_covariance, OptimConfig};
use tailbench::stats::{fit_stable_quantile, fit_t_mle, stable_sample_cms};
use tailbench::tails::{drift_exponent, eta_lower, eta_upper, gamma_bar};

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Outcome);

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_spectrum(r: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let mut l: Vec<f64> = (0..len).map(|_| r.random_range(0.01..100.0)).collect();
    l.sort_by(|a, b| b.total_cmp(a));
    l
}

fn table1_rows() -> Outcome {
    let rows = [(2000, 0.015, 319.83, 3.61), (1797, 0.100, 137.07, 2.91), (1797, 0.200, 93.49, 3.06)];
    let mut worst = 0.0f64;
    let mut got = Vec::new();
    for (n, gamma, l1, want) in rows {
        let eta = eta_upper(n, 1, 0.0, gamma, l1).unwrap();
        worst = worst.max((eta - want).abs());
        got.push(format!("{eta:.4}"));
    }
    outcome(worst <= 0.01, format!("eta_upper = [{}], max error {worst:.2e} (tol 0.01)", got.join(", ")))
}

fn gap_identity() -> Outcome {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = r.random_range(1..60);
        let l = random_spectrum(&mut r, len);
        let n = r.random_range(2..10_000);
        let batch = r.random_range(1..16);
        let delta = r.random_range(0.0..2.0);
        let gamma = r.random_range(1e-4..1.0);
        let gap = eta_upper(n, batch, delta, gamma, l[0]).unwrap() - eta_lower(n, batch, delta, gamma, &l).unwrap();
        let tail: f64 = l[1..].iter().map(|v| v * v).sum::<f64>() / (l[0] * l[0]);
        worst = worst.max((gap - tail).abs());
    }
    outcome(worst <= 1e-12, format!("max |gap - sum_(i>=2) l_i^2 / l_1^2| = {worst:.2e} over 100 spectra (tol 1e-12)"))
}

/// Exhaustive enumeration of all ordered with-replacement batches.
fn brute_covariance(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>, batch: usize) -> DMatrix<f64> {
    let (n, d) = a.shape();
    let per: Vec<DVector<f64>> = (0..n).map(|i| a.row(i).transpose() * (a.row(i).dot(&x.transpose()) - b[i])).collect();
    let total = n.pow(batch as u32);
    let mut mean = DVector::zeros(d);
    let mut second = DMatrix::zeros(d, d);
    for code in 0..total {
        let mut c = code;
        let mut g = DVector::zeros(d);
        for _ in 0..batch {
            g += &per[c % n];
            c /= n;
        }
        g /= batch as f64;
        mean += &g;
        second += &g * g.transpose();
    }
    mean /= total as f64;
    second / total as f64 - &mean * mean.transpose()
}

fn covariance_oracle() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    let mut count = 0;
    for n in 1..=4 {
        for d in 1..=3 {
            for batch in 1..=3 {
                for _ in 0..3 {
                    let a = DMatrix::from_fn(n, d, |_, _| r.sample::<f64, _>(StandardNormal));
                    let b = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
                    let x = DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal));
                    let brute = brute_covariance(&a, &b, &x, batch);
                    let ds = Dataset::new(a, b).unwrap();
                    let closed = gradient_noise_covariance(&ds, x.as_slice(), batch).unwrap();
                    worst = worst.max((closed - brute).amax());
                    count += 1;
                }
            }
        }
    }
    outcome(worst <= 1e-12, format!("max entrywise difference {worst:.2e} over {count} instances (tol 1e-12)"))
}

fn pearson_stationary() -> Outcome {
    // Long-run variance of u = sqrt(nu) z for mu = 0, nu = 6.
    let nu = 6.0;
    let c = PearsonCoord::from_nu(1.0, 0.0, nu).unwrap();
    let z = pearson_terminal_samples(&c, 0.0, 0.01, 15.0, 100_000, 41).unwrap();
    let u: Vec<f64> = z.iter().map(|v| nu.sqrt() * v).collect();
    let n = u.len() as f64;
    let m = u.iter().sum::<f64>() / n;
    let var = u.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    let target = nu / (nu - 2.0);
    let rel = (var / target - 1.0).abs();

    let c = PearsonCoord::new(0.8, 0.3, 0.15).unwrap();
    let z0 = 2.0;
    let mut worst = 0.0f64;
    for (k, t) in [0.25, 1.0, 3.0].into_iter().enumerate() {
        let s = pearson_terminal_samples(&c, z0, 1e-3, t, 40_000, 42 + k as u64).unwrap();
        let (m, se) = mean_se(&s);
        worst = worst.max((m - (c.mu + (z0 - c.mu) * (-c.theta * t).exp())).abs() / se);
    }
    outcome(
        rel <= 0.05 && worst <= 4.0,
        format!("variance {var:.4} vs {target} (rel err {rel:.3}, tol 0.05); conditional mean max dev {worst:.2} SE (tol 4)"),
    )
}

fn moment_oracle() -> Outcome {
    let z0 = 1.2;
    let mut worst = 0.0f64;
    let mut seed = 50;
    for nu in [5.0, 8.0, 15.0] {
        let c = PearsonCoord::from_nu(1.0, -0.3, nu).unwrap();
        for t in [0.3, 1.0, 2.5] {
            let oracle = pearson_moment_oracle(&c, z0, t, 2).unwrap().moments;
            let s = pearson_terminal_samples(&c, z0, 1e-3, t, 40_000, seed).unwrap();
            seed += 1;
            let (m1, se1) = mean_se(&s);
            let sq: Vec<f64> = s.iter().map(|v| v * v).collect();
            let (m2, se2) = mean_se(&sq);
            worst = worst.max((m1 - oracle[1]).abs() / se1).max((m2 - oracle[2]).abs() / se2);
        }
    }
    outcome(worst <= 4.0, format!("max deviation {worst:.2} SE over 9 (t, nu) and k = 1, 2 (tol 4)"))
}

fn convex_order() -> Outcome {
    let raw = gen_gaussian_synthetic(300, 3, 61).unwrap();
    let ds = Dataset::from_raw(&raw.x, &raw.b, false).unwrap();
    let spec = spectral(&ds, 0.0).unwrap();
    let l1 = spec.lambda1();
    let cfg = OptimConfig { gamma: 0.4 * 300.0 / (l1 * l1), delta: 0.0, batch: 1, iterations: 1, seed: 0, replicas: 1 };
    let params = build_pearson_params(&spec, &cfg).unwrap();
    let z0 = [1.0, -0.5, 0.5];
    let h = params.default_step();
    let t1 = 1.0 / params.theta[0];
    let mut min_margin = f64::INFINITY;
    let mut all = true;
    for (i, t) in [t1, 5.0 * t1].into_iter().enumerate() {
        for p in [1.0, 2.0, 3.0] {
            let reports = convex_order_moment(&params, &z0, t, h, p, 100_000, 600 + 10 * i as u64 + p as u64).unwrap();
            for r in reports {
                let margin = (r.lhs - r.rhs) / r.diff_se;
                all &= r.lhs >= r.rhs - 3.0 * r.diff_se;
                min_margin = min_margin.min(margin);
            }
        }
    }
    outcome(all, format!("nu = {:.2?}; min (E|Z|^p - E|Z^|^p)/SE = {min_margin:.2} (tol -3), N = 1e5", params.nu))
}

fn drift_condition() -> Outcome {
    let mut r = rng(7);
    let mut worst = 0.0f64;
    let mut min_inf = f64::INFINITY;
    let mut instances = 0;
    while instances < 50 {
        let len = r.random_range(2..20);
        let l = random_spectrum(&mut r, len);
        let n = r.random_range(20..5000);
        let batch = r.random_range(1..6);
        let delta = r.random_range(0.0..1.0);
        let gbar = gamma_bar(n, batch, delta, &l).unwrap();
        let gamma = gbar * r.random_range(0.01..0.95);
        let theta = drift_exponent(n, batch, delta, gamma, &l).unwrap();
        if theta - 0.05 <= 2.0 {
            continue;
        }
        instances += 1;
        let (nf, bf) = (n as f64, batch as f64);
        let trace: f64 = l.iter().map(|v| v * v).sum();
        let q = |m: f64, rho: f64| 2.0 * nf * bf * (m + nf * delta) / gamma - trace * m + (2.0 - rho) * m * m;
        let l1sq = l[0] * l[0];
        let scale = 2.0 * nf * bf * (l1sq + nf * delta) / gamma;
        worst = worst.max(q(l1sq, theta).abs() / scale);
        let ldsq = l[len - 1] * l[len - 1];
        for k in 0..=40 {
            let rho = 2.0 + (theta - 0.05 - 2.0) * k as f64 / 40.0;
            for j in 0..=200 {
                let m = ldsq + (l1sq - ldsq) * j as f64 / 200.0;
                min_inf = min_inf.min(q(m, rho) / scale);
            }
        }
    }
    outcome(
        worst <= 1e-9 && min_inf > 0.0,
        format!("max |q(l1^2, theta)| (relative) = {worst:.2e} (tol 1e-9); min relative q on grid = {min_inf:.3e} (> 0)"),
    )
}

fn experiment_config(dir: &std::path::Path, seed: u64, gamma: f64, d: usize) -> ExperimentConfig {
    let text = format!(
        r#"{{"dataset": {{"kind": "synthetic", "n": 2000, "d": {d}}},
            "optim": {{"gamma": {gamma}, "delta": 0.0, "B": 1, "K": 1000, "seed": 0, "replicas": 1000}},
            "analysis": {{"fit_stable": false}},
            "output_dir": {:?}, "seed": {seed}}}"#,
        dir.display().to_string()
    );
    ExperimentConfig::from_json(&text).unwrap()
}

fn sandwich() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut good = 0;
    let mut lines = Vec::new();
    for seed in 1..=10u64 {
        let s: RunSummary = run_experiment(&experiment_config(&tmp.path().join(seed.to_string()), seed, 0.015, 200)).unwrap();
        let b = s.bounds.as_ref().unwrap();
        let nu = s.fit_t.as_ref().and_then(|f| f.t_params()).map_or(f64::NAN, |p| p.0);
        let ks = s.ks.as_ref().unwrap();
        let (up, lo) = (ks.upper.as_ref().unwrap(), ks.lower.as_ref().unwrap());
        let in_band = nu >= b.eta_lower - 0.5 && nu <= b.eta_upper + 0.5;
        let retained = !up.reject_at_level && !lo.reject_at_level;
        good += (in_band && retained) as usize;
        lines.push(format!(
            "seed {seed}: eta in [{:.3}, {:.3}], nu_hat {nu:.2}, p_upper {:.3}, p_lower {:.3}",
            b.eta_lower, b.eta_upper, up.result.p_value, lo.result.p_value
        ));
    }
    outcome(good >= 8, format!("{good}/10 seeds satisfy band and both one-sided KS retained (need 8)\n    {}", lines.join("\n    ")))
}

fn sweep(parameter: SweepParameter, values: &[f64], gamma: f64) -> Vec<(f64, f64, f64, f64)> {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = experiment_config(tmp.path(), 2024, gamma, 200);
    cfg.sweep = Some(SweepSpec { parameter, values: values.to_vec() });
    let s = run_sweep(&cfg).unwrap();
    s.rows
        .iter()
        .map(|r| (r.value, r.lambda1.unwrap(), r.eta_upper.unwrap(), r.q99.unwrap()))
        .collect()
}

fn monotonic_sweeps() -> Outcome {
    let g = sweep(SweepParameter::Gamma, &[0.010, 0.015, 0.020, 0.025], 0.015);
    let b = sweep(SweepParameter::Batch, &[1.0, 2.0, 3.0, 4.0], 0.015);
    let d = sweep(SweepParameter::Dim, &[100.0, 140.0, 180.0, 220.0, 260.0], 0.020);
    let strictly = |v: &[f64], up: bool| v.windows(2).all(|w| if up { w[1] > w[0] } else { w[1] < w[0] });
    let col = |rows: &[(f64, f64, f64, f64)], k: usize| -> Vec<f64> {
        rows.iter().map(|r| [r.0, r.1, r.2, r.3][k]).collect()
    };
    let checks = [
        ("eta_upper decreasing in gamma", strictly(&col(&g, 2), false)),
        ("eta_upper increasing in B", strictly(&col(&b, 2), true)),
        ("lambda1 increasing in d", strictly(&col(&d, 1), true)),
        ("eta_upper decreasing in d", strictly(&col(&d, 2), false)),
        ("q99 largest gamma > smallest gamma", g[3].3 > g[0].3),
        ("q99 smallest B > largest B", b[0].3 > b[3].3),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let fmt = |rows: &[(f64, f64, f64, f64)]| {
        rows.iter().map(|r| format!("{}: l1 {:.1} eta* {:.3} q99 {:.4}", r.0, r.1, r.2, r.3)).collect::<Vec<_>>().join("; ")
    };
    outcome(
        failed.is_empty(),
        format!(
            "failed: {:?}\n    gamma: {}\n    B: {}\n    d: {}",
            failed,
            fmt(&g),
            fmt(&b),
            fmt(&d)
        ),
    )
}

fn wishart() -> Outcome {
    let (n, d, draws) = (400, 40, 50);
    let mut r = rng(10);
    let mut total = 0.0;
    for _ in 0..draws {
        let g = DMatrix::from_fn(n, d, |_, _| r.sample::<f64, _>(StandardNormal));
        total += SymmetricEigen::new(g.transpose() * g).eigenvalues.max();
    }
    let mc = total / draws as f64;
    let formula = tailbench::tails::wishart_expected_lambda1sq(n, d, 1.0).unwrap();
    let closed = (((n - 1) as f64).sqrt() + (d as f64).sqrt()).powi(2);
    let rel = (mc / closed - 1.0).abs();
    outcome(
        rel <= 0.03 && (formula - closed).abs() < 1e-9 * closed,
        format!("MC mean {mc:.2} vs (sqrt(n-1)+sqrt(d))^2 = {closed:.2}, rel err {rel:.4} (tol 0.03)"),
    )
}

fn estimators() -> Outcome {
    let t = StudentT::new(5.0).unwrap();
    let mut r = rng(11);
    let s: Vec<f64> = (0..100_000).map(|_| 2.0 * t.sample(&mut r)).collect();
    let (nu, kappa) = fit_t_mle(&s).unwrap().t_params().unwrap();
    let t_ok = (nu / 5.0 - 1.0).abs() <= 0.1 && (kappa / 2.0 - 1.0).abs() <= 0.1;
    let st = stable_sample_cms(1.5, 0.0, 1.0, 0.0, 100_000, &mut rng(12)).unwrap();
    let alpha = fit_stable_quantile(&st).unwrap().stable_params().unwrap().0;
    let s_ok = (alpha - 1.5).abs() <= 0.1;
    outcome(t_ok && s_ok, format!("t fit nu {nu:.3} kappa {kappa:.4} (tol 10%); stable alpha {alpha:.4} (tol 0.1)"))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 11] = [
        ("01_table1_eta_upper", table1_rows),
        ("02_gap_identity", gap_identity),
        ("03_covariance_oracle", covariance_oracle),
        ("04_pearson_stationary_moments", pearson_stationary),
        ("05_moment_oracle", moment_oracle),
        ("06_convex_order", convex_order),
        ("07_drift_condition", drift_condition),
        ("08_end_to_end_sandwich", sandwich),
        ("09_monotonicity_sweeps", monotonic_sweeps),
        ("10_wishart_top_eigenvalue", wishart),
        ("11_estimator_self_consistency", estimators),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} {name} ({:.1}s): {}", start.elapsed().as_secs_f64(), o.detail);
        if !o.pass {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: {} failed: {}", failed.len(), failed.join(", "));
        std::process::exit(1);
    }
}
