use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use tailbench::experiment::{
    init_workers_from_env, run_experiment, run_sweep, verify_suite, CheckStatus, ExperimentConfig, RunSummary,
    VerifyLevel,
};
use tailbench::tails::{eta_upper, BoundsReport};
use tailbench::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFY: u8 = 3;

/// Stages whose failure leaves nothing to analyse.
const CORE_STAGES: [&str; 3] = ["dataset", "bounds", "ensemble"];

#[derive(Parser)]
#[command(name = "tailbench", version, about = "Tail-index bounds and experiments for constant-step SGD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifact bundle.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one experiment per sweep value plus a combined summary.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the built-in checks.
    Verify {
        #[arg(long, value_enum, default_value = "fast")]
        level: Level,
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate the tail-index bounds for given problem constants.
    Bounds {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long = "B")]
        batch: usize,
        #[arg(long)]
        gamma: f64,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        #[arg(long)]
        lambda1: Option<f64>,
        /// Singular values of the design, one per line or comma separated.
        #[arg(long)]
        spectrum: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Fast,
    Full,
}

enum Failure {
    Config(String),
    Runtime(String),
    Verify(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_workers_from_env().map_err(Failure::from).and_then(|_| dispatch(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(Failure::Verify(n)) => {
            eprintln!("{n} check(s) failed");
            ExitCode::from(EXIT_VERIFY)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let s = run_experiment(&cfg)?;
            print_run(&s);
            core_failures(&s.failed_stages)
        }
        Command::Sweep { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let s = run_sweep(&cfg)?;
            println!("{:>10} {:>12} {:>10} {:>10} {:>10} {:>10}", s.parameter.name(), "lambda1", "eta_lower", "eta_upper", "nu_hat", "q99");
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            let mut broken = Vec::new();
            for (row, run) in s.rows.iter().zip(&s.runs) {
                println!(
                    "{:>10} {:>12} {:>10} {:>10} {:>10} {:>10}",
                    row.value,
                    fmt(row.lambda1),
                    fmt(row.eta_lower),
                    fmt(row.eta_upper),
                    fmt(row.nu_hat),
                    fmt(row.q99)
                );
                if let Some(e) = &row.error {
                    eprintln!("{} = {}: {e}", s.parameter.name(), row.value);
                }
                let core_ok = run.as_ref().is_some_and(|r| core_failures(&r.failed_stages).is_ok());
                if !core_ok {
                    broken.push(row.value.to_string());
                }
            }
            println!("summary: {}", cfg.output_dir.join("summary.csv").display());
            if broken.is_empty() {
                Ok(())
            } else {
                Err(Failure::Runtime(format!("sweep values failed: {}", broken.join(", "))))
            }
        }
        Command::Verify { level, report } => {
            let level = match level {
                Level::Fast => VerifyLevel::Fast,
                Level::Full => VerifyLevel::Full,
            };
            let r = verify_suite(level);
            for c in &r.checks {
                let tag = if c.status == CheckStatus::Pass { "PASS" } else { "FAIL" };
                println!("{tag} {:<30} measured={:<12.4e} tolerance={:<10.3e} {:.2}s  {}", c.name, c.measured, c.tolerance, c.seconds, c.detail);
            }
            println!("{} passed, {} failed", r.passed, r.failed);
            if let Some(path) = report {
                let text = serde_json::to_string_pretty(&r).map_err(|e| Failure::Runtime(e.to_string()))?;
                std::fs::write(&path, text + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            }
            if r.all_passed() {
                Ok(())
            } else {
                Err(Failure::Verify(r.failed))
            }
        }
        Command::Bounds { n, d, batch, gamma, delta, lambda1, spectrum } => {
            let value = bounds(n, d, batch, gamma, delta, lambda1, spectrum.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&value).expect("json value"));
            Ok(())
        }
    }
}

fn core_failures(failed: &[String]) -> Result<(), Failure> {
    let core: Vec<&str> = failed.iter().map(String::as_str).filter(|s| CORE_STAGES.contains(s)).collect();
    if core.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("failed stages: {}", core.join(", "))))
    }
}

fn print_run(s: &RunSummary) {
    println!("output: {}", s.output_dir.display());
    if let Some(b) = &s.bounds {
        println!("lambda1 = {:.4}  eta_lower = {:.4}  eta_upper = {:.4}  gamma_bar = {:.4e}", b.lambda1, b.eta_lower, b.eta_upper, b.gamma_bar);
    }
    if let Some((nu, kappa)) = s.fit_t.as_ref().and_then(|f| f.t_params()) {
        println!("fitted t: nu = {nu:.4}  kappa = {kappa:.4}");
    }
    if let Some((alpha, ..)) = s.fit_stable.as_ref().and_then(|f| f.stable_params()) {
        println!("fitted stable: alpha = {alpha:.4}");
    }
    if let Some(ks) = &s.ks {
        for (label, b) in [("upper", &ks.upper), ("lower", &ks.lower)] {
            if let Some(b) = b {
                let verdict = if b.reject_at_level { "reject" } else { "retain" };
                println!("KS {label} (nu = {:.4}): p = {:.4} -> {verdict}", b.nu, b.result.p_value);
            }
        }
    }
    for stage in &s.failed_stages {
        eprintln!("stage failed: {stage} (see manifest.json)");
    }
}

/// Bad bound inputs come from the command line, so they are config errors.
fn invalid(e: Error) -> Failure {
    Failure::Config(e.to_string())
}

fn read_spectrum(path: &Path) -> Result<Vec<f64>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let mut values = Vec::new();
    for tok in text.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
        let v: f64 = tok.parse().map_err(|_| Failure::Config(format!("{}: {tok:?} is not a number", path.display())))?;
        values.push(v);
    }
    if values.is_empty() {
        return Err(Failure::Config(format!("{}: empty spectrum", path.display())));
    }
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

fn bounds(
    n: usize,
    d: usize,
    batch: usize,
    gamma: f64,
    delta: f64,
    lambda1: Option<f64>,
    spectrum: Option<&Path>,
) -> Result<serde_json::Value, Failure> {
    match (spectrum, lambda1) {
        (Some(path), l1) => {
            let l = read_spectrum(path)?;
            if l.len() > d {
                return Err(Failure::Config(format!("spectrum has {} values but d = {d}", l.len())));
            }
            if let Some(l1) = l1 {
                if (l1 - l[0]).abs() > 1e-9 * l[0].abs().max(1.0) {
                    return Err(Failure::Config(format!("--lambda1 {l1} disagrees with the spectrum maximum {}", l[0])));
                }
            }
            let mut report = serde_json::to_value(BoundsReport::new(n, batch, delta, gamma, &l).map_err(invalid)?).expect("json value");
            report["d"] = json!(d);
            Ok(report)
        }
        (None, Some(l1)) => Ok(json!({
            "n": n,
            "d": d,
            "B": batch,
            "gamma": gamma,
            "delta": delta,
            "lambda1": l1,
            "eta_upper": eta_upper(n, batch, delta, gamma, l1).map_err(invalid)?,
            "eta_lower": null,
            "gamma_bar": null,
            "note": "eta_lower and gamma_bar need the full spectrum (--spectrum)",
        })),
        (None, None) => Err(Failure::Config("give --lambda1 or --spectrum".into())),
    }
}
