use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DatasetSpec, ExperimentConfig, SweepParameter};
use super::plot::{Plot, Series, Style};
use crate::dataio::{gen_gaussian_synthetic, hex, load_csv, random_features, spectral, Dataset, Spectrum};
use crate::rng::mix_seed;
use crate::sgd::{project_dominant, run_ensemble, OptimConfig, Projection, RunOptions};
use crate::stats::{
    ccdf_csv, empirical_ccdf, fit_stable_quantile, fit_t_mle, ks_test, percentile_sorted, qq_csv, qq_points, t_cdf,
    t_quantile, FitResult, KsResult, KsVariant, StableQuantiles, StepCdf,
};
use crate::tails::BoundsReport;
use crate::{Error, Result};

const STREAM_DATA: u64 = 0;
const STREAM_FEATURES: u64 = 1;
const STREAM_ENSEMBLE: u64 = 2;
const STREAM_STABLE: u64 = 3;
const CCDF_CURVE_POINTS: usize = 200;

/// Artifact names a run may produce; stale copies are removed first.
const ARTIFACTS: [&str; 12] = [
    "bounds.json",
    "ensemble.csv",
    "ensemble.json",
    "fit_t.json",
    "fit_stable.json",
    "ks.json",
    "ccdf.csv",
    "ccdf.svg",
    "qq.csv",
    "qq_stable.csv",
    "qq.svg",
    "manifest.json",
];

/// Seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub dataset: u64,
    pub random_features: u64,
    pub ensemble: u64,
    pub stable_draws: u64,
}

impl Seeds {
    pub fn derive(master: u64) -> Self {
        Self {
            master,
            dataset: mix_seed(master, STREAM_DATA),
            random_features: mix_seed(master, STREAM_FEATURES),
            ensemble: mix_seed(master, STREAM_ENSEMBLE),
            stable_draws: mix_seed(master, STREAM_STABLE),
        }
    }
}

/// Builds the scaled ERM instance described by `spec`.
pub fn prepare_dataset(spec: &DatasetSpec, seeds: &Seeds) -> Result<(Dataset, Vec<String>)> {
    match spec {
        DatasetSpec::Synthetic { n, d, scale_response } => {
            let raw = gen_gaussian_synthetic(*n, *d, seeds.dataset)?;
            Ok((Dataset::from_raw(&raw.x, &raw.b, *scale_response)?, raw.warnings))
        }
        DatasetSpec::Csv { path, response_column, random_features: rf, scale_response, columns } => {
            let raw = load_csv(path, *response_column)?;
            let mut warnings = raw.warnings;
            let x = match (rf, columns) {
                (Some(rf), _) => random_features(&raw.x, rf.d, seeds.random_features, rf.relu_scale)?,
                (None, Some(c)) => {
                    if *c > raw.x.ncols() {
                        return Err(Error::Config(format!("columns = {c} exceeds the {} available features", raw.x.ncols())));
                    }
                    raw.x.columns(0, *c).into_owned()
                }
                (None, None) => raw.x,
            };
            if x.nrows() <= x.ncols() {
                warnings.push(format!("n = {} <= d = {}", x.nrows(), x.ncols()));
            }
            Ok((Dataset::from_raw(&x, &raw.b, *scale_response)?, warnings))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub status: StageStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub dataset_digest: Option<String>,
    pub files: BTreeMap<String, FileEntry>,
    pub stages: Vec<StageRecord>,
    pub warnings: Vec<String>,
}

/// Collects every file a run writes, with its digest.
struct Bundle {
    dir: PathBuf,
    files: BTreeMap<String, FileEntry>,
    stages: Vec<StageRecord>,
}

impl Bundle {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        for name in ARTIFACTS {
            let p = dir.join(name);
            if p.is_file() {
                fs::remove_file(p)?;
            }
        }
        Ok(Self { dir: dir.to_path_buf(), files: BTreeMap::new(), stages: Vec::new() })
    }

    /// Writes through a temporary file so an artifact is complete or absent.
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.files.insert(name.to_string(), FileEntry { sha256: sha256_hex(bytes), bytes: bytes.len() });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Option<T> {
        match f(self) {
            Ok(v) => {
                self.stages.push(StageRecord { stage: name.into(), status: StageStatus::Ok, error: None });
                Some(v)
            }
            Err(e) => {
                self.stages.push(StageRecord { stage: name.into(), status: StageStatus::Failed, error: Some(e.to_string()) });
                None
            }
        }
    }

    fn failed(&self) -> Vec<String> {
        self.stages.iter().filter(|s| s.status == StageStatus::Failed).map(|s| s.stage.clone()).collect()
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Bounds plus the realized spectrum summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundsArtifact {
    #[serde(flatten)]
    pub bounds: BoundsReport,
    pub beta: f64,
    pub lambda_d: f64,
}

/// One-sided comparison against a bound-parameterized scaled t.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundKs {
    pub nu: f64,
    pub kappa: f64,
    pub null_hypothesis: String,
    pub result: KsResult,
    pub reject_at_level: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KsReport {
    pub level: f64,
    /// Scale of the bound-parameterized references: matches the sample IQR.
    pub kappa_rule: String,
    pub two_sided_t: Option<KsResult>,
    pub two_sided_stable: Option<KsResult>,
    pub upper: Option<BoundKs>,
    pub lower: Option<BoundKs>,
    pub notes: Vec<String>,
}

impl KsReport {
    /// Neither one-sided null is rejected.
    pub fn sandwich_holds(&self) -> Option<bool> {
        Some(!self.upper.as_ref()?.reject_at_level && !self.lower.as_ref()?.reject_at_level)
    }
}

/// What a finished run reports back (the artifacts hold the full record).
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub bounds: Option<BoundsReport>,
    pub fit_t: Option<FitResult>,
    pub fit_stable: Option<FitResult>,
    pub ks: Option<KsReport>,
    /// 99th percentile of the centered projections.
    pub q99: Option<f64>,
    /// Positive-tail empirical CCDF of the centered projections.
    pub ccdf: Vec<(f64, f64)>,
    pub failed_stages: Vec<String>,
}

/// Scale matching the sample interquartile range to that of `kappa t(nu)`.
pub fn iqr_matched_kappa(sorted: &[f64], nu: f64) -> Result<f64> {
    let iqr = percentile_sorted(sorted, 0.75) - percentile_sorted(sorted, 0.25);
    if !(iqr > 0.0) {
        return Err(Error::DegenerateInput("zero interquartile range".into()));
    }
    Ok(iqr / (2.0 * t_quantile(0.75, nu, 1.0)?))
}

fn bound_ks(z: &[f64], sorted: &[f64], nu: f64, upper: bool, level: f64) -> Result<BoundKs> {
    if !(nu > 0.0) {
        return Err(Error::Domain(format!("bound {nu} is not a valid t parameter")));
    }
    let kappa = iqr_matched_kappa(sorted, nu)?;
    let cdf = |x: f64| t_cdf(x, nu, kappa).unwrap_or(f64::NAN);
    let (variant, null_hypothesis) = if upper {
        (KsVariant::OneSidedGeq, "F_z(x) >= F_{kappa t(eta_upper)}(x) for all x")
    } else {
        (KsVariant::OneSidedLeq, "F_z(x) <= F_{kappa t(eta_lower)}(x) for all x")
    };
    let result = ks_test(z, &cdf, variant)?;
    Ok(BoundKs { nu, kappa, null_hypothesis: null_hypothesis.into(), reject_at_level: result.p_value < level, result })
}

/// `P(kappa t(nu) > x)` on a log grid over `[lo, hi]`.
fn t_ccdf_curve(nu: f64, kappa: f64, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    (0..CCDF_CURVE_POINTS)
        .filter_map(|i| {
            let x = lo * (hi / lo).powf(i as f64 / (CCDF_CURVE_POINTS - 1) as f64);
            t_cdf(-x, nu, kappa).ok().map(|c| (x, c))
        })
        .collect()
}

fn positive_tail(ccdf: &[(f64, f64)]) -> Vec<(f64, f64)> {
    ccdf.iter().copied().filter(|&(x, c)| x > 0.0 && c > 0.0).collect()
}

/// Runs one experiment: dataset, spectrum and bounds, SGD ensemble,
/// fits, KS tests, CCDF and QQ extraction, manifest. Stage failures are
/// recorded in the manifest; the artifacts of earlier stages are kept.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    if cfg.sweep.is_some() {
        return Err(Error::Config("config has a sweep; use run_sweep".into()));
    }
    let seeds = Seeds::derive(cfg.seed);
    let mut bundle = Bundle::open(&cfg.output_dir)?;
    let mut warnings = Vec::new();
    let level = cfg.analysis.ks_level;
    let optim = OptimConfig { seed: seeds.ensemble, ..cfg.optim };

    let data = bundle.stage("dataset", |_| {
        let (ds, w) = prepare_dataset(&cfg.dataset, &seeds)?;
        let spec = spectral(&ds, optim.delta)?;
        Ok((ds, spec, w))
    });
    let mut summary = RunSummary {
        output_dir: cfg.output_dir.clone(),
        bounds: None,
        fit_t: None,
        fit_stable: None,
        ks: None,
        q99: None,
        ccdf: Vec::new(),
        failed_stages: Vec::new(),
    };
    let mut dataset_digest = None;

    if let Some((ds, spec, w)) = data {
        warnings.extend(w);
        dataset_digest = Some(ds.digest());
        analyse(cfg, &optim, &seeds, level, &ds, &spec, &mut bundle, &mut summary);
    }

    summary.failed_stages = bundle.failed();
    let manifest = Manifest {
        config: cfg.clone(),
        seeds,
        dataset_digest,
        files: bundle.files.clone(),
        stages: bundle.stages.clone(),
        warnings,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&cfg.output_dir.join("manifest.json"), text.as_bytes())?;
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn analyse(
    cfg: &ExperimentConfig,
    optim: &OptimConfig,
    seeds: &Seeds,
    level: f64,
    ds: &Dataset,
    spec: &Spectrum,
    bundle: &mut Bundle,
    summary: &mut RunSummary,
) {
    summary.bounds = bundle.stage("bounds", |b| {
        let report = BoundsReport::new(ds.n(), optim.batch, optim.delta, optim.gamma, spec.sigma())?;
        let lambda_d = *spec.sigma().last().expect("non-empty spectrum");
        b.json("bounds.json", &BoundsArtifact { bounds: report.clone(), beta: spec.beta(), lambda_d })?;
        Ok(report)
    });

    let Some(proj) = bundle.stage("ensemble", |b| -> Result<Projection> {
        let ens = run_ensemble(ds, spec, optim, cfg.init, RunOptions::guarded())?;
        let proj = project_dominant(&ens, spec)?;
        b.write("ensemble.csv", ens.to_csv(&proj).as_bytes())?;
        b.json("ensemble.json", &ens.sidecar())?;
        Ok(proj)
    }) else {
        return;
    };
    let z = proj.z;
    let mut sorted = z.clone();
    sorted.sort_by(f64::total_cmp);
    if sorted.len() >= 2 {
        summary.q99 = Some(percentile_sorted(&sorted, 0.99));
    }

    summary.fit_t = bundle.stage("fit_t", |b| {
        let fit = fit_t_mle(&z)?;
        b.json("fit_t.json", &fit)?;
        Ok(fit)
    });
    let stable_quantiles = if cfg.analysis.fit_stable {
        bundle.stage("fit_stable", |b| {
            let fit = fit_stable_quantile(&z)?;
            b.json("fit_stable.json", &fit)?;
            let q = StableQuantiles::from_fit(&fit, cfg.analysis.stable_draws, seeds.stable_draws)?;
            Ok((fit, q))
        })
    } else {
        None
    };
    summary.fit_stable = stable_quantiles.as_ref().map(|(f, _)| f.clone());

    summary.ks = bundle.stage("ks", |b| {
        let mut notes = Vec::new();
        let two_sided_t = match summary.fit_t.as_ref().and_then(FitResult::t_params) {
            Some((nu, kappa)) => Some(ks_test(&z, &|x: f64| t_cdf(x, nu, kappa).unwrap_or(f64::NAN), KsVariant::TwoSided)?),
            None => {
                notes.push("two-sided t test skipped: no t fit".into());
                None
            }
        };
        let two_sided_stable = match &stable_quantiles {
            Some((_, q)) => Some(ks_test(&z, &StepCdf::new(q.draws())?, KsVariant::TwoSided)?),
            None => None,
        };
        let (mut upper, mut lower) = (None, None);
        if let Some(bounds) = &summary.bounds {
            match bound_ks(&z, &sorted, bounds.eta_upper, true, level) {
                Ok(r) => upper = Some(r),
                Err(e) => notes.push(format!("upper-bound test skipped: {e}")),
            }
            match bound_ks(&z, &sorted, bounds.eta_lower, false, level) {
                Ok(r) => lower = Some(r),
                Err(e) => notes.push(format!("lower-bound test skipped: {e}")),
            }
        }
        let report = KsReport {
            level,
            kappa_rule: "kappa matches the sample interquartile range to that of kappa t(nu)".into(),
            two_sided_t,
            two_sided_stable,
            upper,
            lower,
            notes,
        };
        b.json("ks.json", &report)?;
        Ok(report)
    });

    if let Some(ccdf) = bundle.stage("ccdf", |b| {
        let ccdf = empirical_ccdf(&z)?;
        b.write("ccdf.csv", ccdf_csv(&ccdf).as_bytes())?;
        let tail = positive_tail(&ccdf);
        let (lo, hi) = match (tail.first(), tail.last()) {
            (Some(f), Some(l)) => (f.0, l.0 * 2.0),
            _ => (1e-3, 1.0),
        };
        let mut plot = Plot::new("Empirical CCDF of centered projections", "x", "P(z > x)").log_log();
        plot = plot.with_series(Series::new("empirical", tail.clone(), Style::Markers));
        if let Some(bounds) = &summary.bounds {
            for (label, nu) in [("eta_lower", bounds.eta_lower), ("eta_upper", bounds.eta_upper)] {
                if let Ok(kappa) = iqr_matched_kappa(&sorted, nu) {
                    plot = plot.with_series(Series::new(format!("t({label} = {nu:.3})"), t_ccdf_curve(nu, kappa, lo, hi), Style::Line));
                }
            }
        }
        if let Some((nu, kappa)) = summary.fit_t.as_ref().and_then(FitResult::t_params) {
            plot = plot.with_series(Series::new(format!("fitted t({nu:.3})"), t_ccdf_curve(nu, kappa, lo, hi), Style::Dashed));
        }
        b.write("ccdf.svg", plot.to_svg().as_bytes())?;
        Ok(tail)
    }) {
        summary.ccdf = ccdf;
    }

    bundle.stage("qq", |b| {
        let k = cfg.analysis.qq_points.min(z.len());
        let mut t_pts = None;
        if let Some((nu, kappa)) = summary.fit_t.as_ref().and_then(FitResult::t_params) {
            let pts = qq_points(&z, |p| t_quantile(p, nu, kappa).unwrap_or(f64::NAN), k)?;
            b.write("qq.csv", qq_csv(&pts).as_bytes())?;
            t_pts = Some(pts);
        }
        let mut s_pts = None;
        if let Some((_, q)) = &stable_quantiles {
            let pts = qq_points(&z, |p| q.quantile(p), k)?;
            b.write("qq_stable.csv", qq_csv(&pts).as_bytes())?;
            s_pts = Some(pts);
        }
        if t_pts.is_none() && s_pts.is_none() {
            return Err(Error::DegenerateInput("no fitted family to compare against".into()));
        }
        let mut plot = Plot::new("QQ plots of the fitted families", "theoretical quantile", "empirical quantile").with_diagonal();
        if let Some(p) = t_pts {
            plot = plot.with_series(Series::new("scaled t", p, Style::Markers));
        }
        if let Some(p) = s_pts {
            plot = plot.with_series(Series::new("alpha-stable", p, Style::Markers));
        }
        b.write("qq.svg", plot.to_svg().as_bytes())
    });
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub directory: String,
    pub lambda1: Option<f64>,
    pub eta_lower: Option<f64>,
    pub eta_upper: Option<f64>,
    pub nu_hat: Option<f64>,
    pub q99: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepManifest {
    pub config: ExperimentConfig,
    pub parameter: String,
    pub rows: Vec<SweepRow>,
    pub files: BTreeMap<String, FileEntry>,
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub parameter: SweepParameter,
    pub rows: Vec<SweepRow>,
    pub runs: Vec<Option<RunSummary>>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// Runs one experiment per sweep value in `<output_dir>/<param>_<value>/`,
/// then writes `summary.csv`, `ccdf_overlay.svg` and a sweep manifest.
/// A failing value leaves an error in its row; the others proceed.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepSummary> {
    cfg.validate()?;
    let sweep = cfg.sweep.clone().ok_or_else(|| Error::Config("config has no sweep".into()))?;
    fs::create_dir_all(&cfg.output_dir)?;
    let name = sweep.parameter.name();
    let runs: Vec<(SweepRow, Option<RunSummary>)> = sweep
        .values
        .par_iter()
        .map(|&v| {
            let directory = format!("{name}_{v}");
            let mut row = SweepRow {
                value: v,
                directory: directory.clone(),
                lambda1: None,
                eta_lower: None,
                eta_upper: None,
                nu_hat: None,
                q99: None,
                error: None,
            };
            let run = cfg.at_sweep_value(v, cfg.output_dir.join(&directory)).and_then(|c| run_experiment(&c));
            match run {
                Ok(s) => {
                    if let Some(b) = &s.bounds {
                        row.lambda1 = Some(b.lambda1);
                        row.eta_lower = Some(b.eta_lower);
                        row.eta_upper = Some(b.eta_upper);
                    }
                    row.nu_hat = s.fit_t.as_ref().and_then(FitResult::t_params).map(|p| p.0);
                    row.q99 = s.q99;
                    if !s.failed_stages.is_empty() {
                        row.error = Some(format!("failed stages: {}", s.failed_stages.join(", ")));
                    }
                    (row, Some(s))
                }
                Err(e) => {
                    row.error = Some(e.to_string());
                    (row, None)
                }
            }
        })
        .collect();
    let (rows, runs): (Vec<SweepRow>, Vec<Option<RunSummary>>) = runs.into_iter().unzip();

    let mut csv = String::from("value,lambda1,eta_lower,eta_upper,nu_hat,q99\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.value,
            opt(r.lambda1),
            opt(r.eta_lower),
            opt(r.eta_upper),
            opt(r.nu_hat),
            opt(r.q99)
        ));
    }
    let mut plot = Plot::new(&format!("Empirical CCDFs across {name}"), "x", "P(z > x)").log_log();
    for (r, s) in rows.iter().zip(&runs) {
        if let Some(s) = s {
            plot = plot.with_series(Series::new(format!("{name} = {}", r.value), s.ccdf.clone(), Style::Line));
        }
    }
    let svg = plot.to_svg();
    let mut files = BTreeMap::new();
    for (file, bytes) in [("summary.csv", csv.as_bytes()), ("ccdf_overlay.svg", svg.as_bytes())] {
        write_atomic(&cfg.output_dir.join(file), bytes)?;
        files.insert(file.to_string(), FileEntry { sha256: sha256_hex(bytes), bytes: bytes.len() });
    }
    for r in &rows {
        let rel = format!("{}/manifest.json", r.directory);
        if let Ok(bytes) = fs::read(cfg.output_dir.join(&rel)) {
            files.insert(rel, FileEntry { sha256: sha256_hex(&bytes), bytes: bytes.len() });
        }
    }
    let manifest = SweepManifest { config: cfg.clone(), parameter: name.into(), rows: rows.clone(), files };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&cfg.output_dir.join("manifest.json"), text.as_bytes())?;
    Ok(SweepSummary { parameter: sweep.parameter, rows, runs })
}
