//! Python module `tailbench`: bounds, fitting, KS tests, stable sampling,
//! the moment oracle, datasets, ensembles and full experiment runs.

use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use tailbench::dataio::{gen_gaussian_synthetic, spectral, Dataset as CoreDataset};
use tailbench::diffusion::{pearson_moment_oracle, PearsonCoord};
use tailbench::experiment::{run_experiment as core_run_experiment, verify_suite, ExperimentConfig, VerifyLevel};
use tailbench::rng::rng_from_seed;
use tailbench::sgd::{project_dominant, run_ensemble as core_run_ensemble, InitSampler, OptimConfig, RunOptions};
use tailbench::stats::{
    fit_stable_quantile, fit_t_mle, ks_test, stable_sample_cms, t_cdf as core_t_cdf, KsVariant,
};
use tailbench::tails::{self, BoundsReport};
use tailbench::Error;

create_exception!(tailbench, TailbenchError, PyException);

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(_)
        | Error::Domain(_)
        | Error::DegenerateInput(_)
        | Error::DimensionMismatch { .. }
        | Error::AssumptionViolation(_) => PyValueError::new_err(e.to_string()),
        _ => TailbenchError::new_err(e.to_string()),
    }
}

/// Converts any serializable value to plain Python objects via `json`.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| TailbenchError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyfunction]
#[pyo3(signature = (n, batch, delta, gamma, lambda1))]
fn eta_upper(n: usize, batch: usize, delta: f64, gamma: f64, lambda1: f64) -> PyResult<f64> {
    tails::eta_upper(n, batch, delta, gamma, lambda1).map_err(err)
}

/// Lower bound; `lambdas` are the singular values in decreasing order.
#[pyfunction]
#[pyo3(signature = (n, batch, delta, gamma, lambdas))]
fn eta_lower(n: usize, batch: usize, delta: f64, gamma: f64, lambdas: Vec<f64>) -> PyResult<f64> {
    tails::eta_lower(n, batch, delta, gamma, &lambdas).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (n, batch, delta, lambdas))]
fn gamma_bar(n: usize, batch: usize, delta: f64, lambdas: Vec<f64>) -> PyResult<f64> {
    tails::gamma_bar(n, batch, delta, &lambdas).map_err(err)
}

/// All bounds as a dict with the `bounds.json` keys.
#[pyfunction]
#[pyo3(signature = (n, batch, delta, gamma, lambdas))]
fn bounds<'py>(py: Python<'py>, n: usize, batch: usize, delta: f64, gamma: f64, lambdas: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &BoundsReport::new(n, batch, delta, gamma, &lambdas).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (x, nu, kappa=1.0))]
fn t_cdf(x: f64, nu: f64, kappa: f64) -> PyResult<f64> {
    core_t_cdf(x, nu, kappa).map_err(err)
}

/// Scaled Student-t MLE; returns `(nu, kappa)`.
#[pyfunction]
fn fit_t(py: Python<'_>, samples: Vec<f64>) -> PyResult<(f64, f64)> {
    let fit = py.detach(|| fit_t_mle(&samples)).map_err(err)?;
    Ok(fit.t_params().expect("t fit"))
}

/// McCulloch quantile fit; returns `(alpha, skew, scale, location)`.
#[pyfunction]
fn fit_stable(samples: Vec<f64>) -> PyResult<(f64, f64, f64, f64)> {
    let fit = fit_stable_quantile(&samples).map_err(err)?;
    Ok(fit.stable_params().expect("stable fit"))
}

fn variant(name: &str) -> PyResult<KsVariant> {
    match name {
        "two-sided" => Ok(KsVariant::TwoSided),
        "geq" => Ok(KsVariant::OneSidedGeq),
        "leq" => Ok(KsVariant::OneSidedLeq),
        other => Err(PyValueError::new_err(format!("unknown KS variant {other:?}; use two-sided, geq or leq"))),
    }
}

/// KS test of `samples` against `kappa * t(nu)`. `alternative` is
/// `"two-sided"`, `"geq"` or `"leq"`.
#[pyfunction]
#[pyo3(signature = (samples, nu, kappa=1.0, alternative="two-sided"))]
fn ks_t<'py>(py: Python<'py>, samples: Vec<f64>, nu: f64, kappa: f64, alternative: &str) -> PyResult<Bound<'py, PyAny>> {
    core_t_cdf(0.0, nu, kappa).map_err(err)?;
    let cdf = |x: f64| core_t_cdf(x, nu, kappa).unwrap_or(f64::NAN);
    let r = ks_test(&samples, &cdf, variant(alternative)?).map_err(err)?;
    to_py(py, &r)
}

#[pyfunction]
#[pyo3(signature = (alpha, skew, scale, location, n, seed=0))]
fn stable_sample(alpha: f64, skew: f64, scale: f64, location: f64, n: usize, seed: u64) -> PyResult<Vec<f64>> {
    stable_sample_cms(alpha, skew, scale, location, n, &mut rng_from_seed(seed)).map_err(err)
}

/// Conditional moments `E[z_t^k | z_0]`, `k = 0..=p`, of a Pearson diffusion.
#[pyfunction]
#[pyo3(signature = (theta, mu, a, z0, t, p))]
fn pearson_moments(theta: f64, mu: f64, a: f64, z0: f64, t: f64, p: usize) -> PyResult<Vec<f64>> {
    let c = PearsonCoord::new(theta, mu, a).map_err(err)?;
    Ok(pearson_moment_oracle(&c, z0, t, p).map_err(err)?.moments)
}

/// Runs an experiment from a JSON config string; returns the run summary.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(err)?;
    let summary = py.detach(|| core_run_experiment(&cfg)).map_err(err)?;
    to_py(py, &summary)
}

/// Runs the built-in checks (`"fast"` or `"full"`); returns the report.
#[pyfunction]
#[pyo3(signature = (level="fast"))]
fn verify<'py>(py: Python<'py>, level: &str) -> PyResult<Bound<'py, PyAny>> {
    let level = match level {
        "fast" => VerifyLevel::Fast,
        "full" => VerifyLevel::Full,
        other => return Err(PyValueError::new_err(format!("unknown level {other:?}"))),
    };
    let report = py.detach(|| verify_suite(level));
    to_py(py, &report)
}

/// A ridge-regression instance `(A, b)`.
#[pyclass(frozen)]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    /// `rows` is a list of feature rows; `b` the responses.
    #[new]
    fn new(rows: Vec<Vec<f64>>, b: Vec<f64>) -> PyResult<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(PyValueError::new_err("ragged rows"));
        }
        let a = DMatrix::from_row_slice(n, d, &rows.concat());
        let inner = CoreDataset::new(a, DVector::from_vec(b)).map_err(err)?;
        Ok(Self { inner })
    }

    /// Gaussian synthetic data, min-max scaled.
    #[staticmethod]
    #[pyo3(signature = (n, d, seed=0, scale_response=false))]
    fn synthetic(n: usize, d: usize, seed: u64, scale_response: bool) -> PyResult<Self> {
        let raw = gen_gaussian_synthetic(n, d, seed).map_err(err)?;
        let inner = CoreDataset::from_raw(&raw.x, &raw.b, scale_response).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    /// Spectral summary at ridge parameter `delta`.
    #[pyo3(signature = (delta=0.0))]
    fn spectrum<'py>(&self, py: Python<'py>, delta: f64) -> PyResult<Bound<'py, PyAny>> {
        let s = spectral(&self.inner, delta).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("sigma", s.sigma().to_vec())?;
        out.set_item("lambda1", s.lambda1())?;
        out.set_item("trace_AtA", s.trace_ata())?;
        out.set_item("alpha", s.alpha().as_slice().to_vec())?;
        out.set_item("beta", s.beta())?;
        out.set_item("x_star", s.x_star().as_slice().to_vec())?;
        Ok(out.into_any())
    }

    /// Independent SGD replicas; returns the centered projections onto the
    /// dominant direction and the number of divergent replicas.
    #[pyo3(signature = (gamma, batch, iterations, replicas, delta=0.0, seed=0, init_sigma=1.0))]
    #[allow(clippy::too_many_arguments)]
    fn run_ensemble<'py>(
        &self,
        py: Python<'py>,
        gamma: f64,
        batch: usize,
        iterations: usize,
        replicas: usize,
        delta: f64,
        seed: u64,
        init_sigma: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg = OptimConfig { gamma, delta, batch, iterations, seed, replicas };
        let init = InitSampler::Gaussian { sigma: init_sigma };
        let (z, divergent) = py
            .detach(|| {
                let spec = spectral(&self.inner, delta)?;
                let ens = core_run_ensemble(&self.inner, &spec, &cfg, init, RunOptions::guarded())?;
                let proj = project_dominant(&ens, &spec)?;
                Ok::<_, Error>((proj.z, ens.divergent))
            })
            .map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("z", z)?;
        out.set_item("divergent", divergent)?;
        Ok(out.into_any())
    }
}

#[pymodule]
#[pyo3(name = "tailbench")]
fn tailbench_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TailbenchError", m.py().get_type::<TailbenchError>())?;
    m.add_class::<Dataset>()?;
    for f in [
        wrap_pyfunction!(eta_upper, m)?,
        wrap_pyfunction!(eta_lower, m)?,
        wrap_pyfunction!(gamma_bar, m)?,
        wrap_pyfunction!(bounds, m)?,
        wrap_pyfunction!(t_cdf, m)?,
        wrap_pyfunction!(fit_t, m)?,
        wrap_pyfunction!(fit_stable, m)?,
        wrap_pyfunction!(ks_t, m)?,
        wrap_pyfunction!(stable_sample, m)?,
        wrap_pyfunction!(pearson_moments, m)?,
        wrap_pyfunction!(run_experiment, m)?,
        wrap_pyfunction!(verify, m)?,
    ] {
        m.add_function(f)?;
    }
    Ok(())
}
