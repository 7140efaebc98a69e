//! Heavy-tailed behaviour of constant-step SGD on ridge regression.
//!
//! The crate simulates minibatch SGD and its homogenized diffusion
//! approximation, evaluates closed-form upper and lower bounds on the
//! asymptotic tail-index, and checks those bounds statistically against
//! ensembles of final iterates.
//!
//! Module map:
//!
//! * [`dataio`]: datasets, min-max scaling, random features, CSV ingest and
//!   the spectral decomposition every other module consumes.
//! * [`sgd`]: minibatch SGD, gradient-noise covariance, replica ensembles.
//! * [`diffusion`]: hSGD, the reduced coupled system, Pearson diffusions
//!   and the polynomial-process moment oracle.
//! * [`tails`]: tail-index bounds, critical learning rate, drift condition.
//! * [`stats`]: CCDF/QQ extraction, Student-t MLE, KS tests, alpha-stable
//!   sampling and quantile fitting.
//! * [`experiment`]: config-driven runs, sweeps and the verification suite.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataio;
pub mod diffusion;
mod error;
pub mod experiment;
pub mod linalg;
pub mod rng;
pub mod sgd;
pub mod stats;
pub mod tails;

pub use error::{Error, Result};
