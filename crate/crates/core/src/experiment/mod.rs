//! Config-driven experiment orchestration: dataset preparation, SGD
//! ensembles, bounds, fits, KS tests, sweeps and the built-in check suite.

mod config;
pub mod plot;
mod run;
mod verify;

pub use config::{AnalysisOptions, DatasetSpec, ExperimentConfig, RandomFeatureSpec, SweepParameter, SweepSpec};
pub use run::{
    iqr_matched_kappa, prepare_dataset, run_experiment, run_sweep, sha256_hex, BoundKs, BoundsArtifact, FileEntry,
    KsReport, Manifest, RunSummary, Seeds, StageRecord, StageStatus, SweepManifest, SweepRow, SweepSummary,
};
pub use verify::{
    enumerated_covariance, verify_suite, wishart_mc_top_eigenvalue, CheckResult, CheckStatus, VerifyLevel, VerifyReport,
};

/// Environment variable capping the worker threads.
pub const WORKERS_ENV: &str = "TAILBENCH_WORKERS";

/// Sizes the global rayon pool from `TAILBENCH_WORKERS` when set. Returns
/// the number of workers requested, if any.
pub fn init_workers_from_env() -> crate::Result<Option<usize>> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(None);
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| crate::Error::Config(format!("{WORKERS_ENV} = {v:?} is not a positive integer")))?;
    // A pool that already exists keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}
