use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::DEFAULT_RELU_SCALE;
use crate::sgd::{InitSampler, OptimConfig};
use crate::{Error, Result};

/// Where the ERM instance comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Isotropic Gaussian regression data.
    Synthetic {
        n: usize,
        d: usize,
        #[serde(default)]
        scale_response: bool,
    },
    /// Numeric CSV; column `response_column` is the response.
    Csv {
        path: PathBuf,
        response_column: usize,
        #[serde(default)]
        random_features: Option<RandomFeatureSpec>,
        /// Apply the data's min-max transform to the response as well.
        #[serde(default)]
        scale_response: bool,
        /// Keep only the first `columns` raw columns (no random features).
        #[serde(default)]
        columns: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomFeatureSpec {
    pub d: usize,
    #[serde(default = "default_relu_scale")]
    pub relu_scale: f64,
}

fn default_relu_scale() -> f64 {
    DEFAULT_RELU_SCALE
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisOptions {
    #[serde(default = "default_level")]
    pub ks_level: f64,
    #[serde(default = "default_true")]
    pub fit_stable: bool,
    #[serde(default = "default_qq_points")]
    pub qq_points: usize,
    /// CMS draws backing the stable quantile function.
    #[serde(default = "default_stable_draws")]
    pub stable_draws: usize,
}

fn default_level() -> f64 {
    0.05
}
fn default_true() -> bool {
    true
}
fn default_qq_points() -> usize {
    100
}
fn default_stable_draws() -> usize {
    1_000_000
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            ks_level: default_level(),
            fit_stable: true,
            qq_points: default_qq_points(),
            stable_draws: default_stable_draws(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParameter {
    #[serde(rename = "gamma")]
    Gamma,
    #[serde(rename = "B")]
    Batch,
    #[serde(rename = "d")]
    Dim,
}

impl SweepParameter {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParameter::Gamma => "gamma",
            SweepParameter::Batch => "B",
            SweepParameter::Dim => "d",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

/// One experiment (or a sweep of experiments when `sweep` is set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub optim: OptimConfig,
    #[serde(default)]
    pub init: InitSampler,
    #[serde(default)]
    pub analysis: AnalysisOptions,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    pub output_dir: PathBuf,
    /// Master seed; every random stream of the run derives from it.
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate().map_err(|e| Error::Config(e.to_string()))?;
        let a = &self.analysis;
        if !(a.ks_level > 0.0 && a.ks_level < 1.0) {
            return Err(Error::Config(format!("ks_level {} must lie in (0, 1)", a.ks_level)));
        }
        if a.qq_points == 0 || a.stable_draws < 2 {
            return Err(Error::Config("qq_points and stable_draws must be positive".into()));
        }
        match &self.dataset {
            DatasetSpec::Synthetic { n, d, .. } if *n == 0 || *d == 0 => {
                return Err(Error::Config(format!("synthetic shape {n}x{d}")));
            }
            DatasetSpec::Csv { random_features: Some(_), columns: Some(_), .. } => {
                return Err(Error::Config("`columns` and `random_features` are exclusive".into()));
            }
            DatasetSpec::Csv { random_features: Some(rf), .. } if rf.d == 0 || !(rf.relu_scale > 0.0) => {
                return Err(Error::Config("random_features needs d >= 1 and relu_scale > 0".into()));
            }
            _ => {}
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(Error::Config("sweep values are empty".into()));
            }
            for &v in &sweep.values {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::Config(format!("sweep value {v} must be positive")));
                }
                let integral = matches!(sweep.parameter, SweepParameter::Batch | SweepParameter::Dim);
                if integral && v.fract() != 0.0 {
                    return Err(Error::Config(format!("{} sweep value {v} must be an integer", sweep.parameter.name())));
                }
            }
        }
        Ok(())
    }

    /// The configuration of one sweep point: the swept value substituted,
    /// the sweep removed, output redirected to `dir`.
    pub fn at_sweep_value(&self, value: f64, dir: PathBuf) -> Result<Self> {
        let sweep = self.sweep.as_ref().ok_or_else(|| Error::Config("no sweep configured".into()))?;
        let mut cfg = self.clone();
        cfg.sweep = None;
        cfg.output_dir = dir;
        match sweep.parameter {
            SweepParameter::Gamma => cfg.optim.gamma = value,
            SweepParameter::Batch => cfg.optim.batch = value as usize,
            SweepParameter::Dim => match &mut cfg.dataset {
                DatasetSpec::Synthetic { d, .. } => *d = value as usize,
                DatasetSpec::Csv { random_features: Some(rf), .. } => rf.d = value as usize,
                DatasetSpec::Csv { columns, .. } => *columns = Some(value as usize),
            },
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
