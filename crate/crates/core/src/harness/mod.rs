//! Experiment orchestration behind the command-line front end.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod params_io;
pub mod verify;

use rand::SeedableRng;
use thiserror::Error;

use crate::bridge::BridgeError;
use crate::dynamics::{DynamicsError, NoiseRng};
use crate::learning::LearningError;
use crate::model::ModelError;

pub use config::{parse_config, parse_layers, resolve_config, ConfigError, Overrides, RunConfig};
pub use params_io::{parse_params, ParamsError};

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const BAD_CONFIG: i32 = 2;
    pub const NON_CONVERGENCE: i32 = 3;
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error("relaxation did not converge after {steps} steps (last step size {residual:e})")]
    NonConvergence { steps: usize, residual: f64 },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{0}")]
    Internal(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Params(_) => exit::BAD_CONFIG,
            HarnessError::NonConvergence { .. } => exit::NON_CONVERGENCE,
            _ => exit::INTERNAL,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<DynamicsError> for HarnessError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::NonConvergence { steps, residual, .. } => HarnessError::NonConvergence { steps, residual },
            other => HarnessError::Internal(other.to_string()),
        }
    }
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        HarnessError::Internal(e.to_string())
    }
}

impl From<BridgeError> for HarnessError {
    fn from(e: BridgeError) -> Self {
        match e {
            BridgeError::Dynamics(d) => d.into(),
            other => HarnessError::Internal(other.to_string()),
        }
    }
}

impl From<LearningError> for HarnessError {
    fn from(e: LearningError) -> Self {
        match e {
            LearningError::Dynamics(d) => d.into(),
            LearningError::Bridge(b) => b.into(),
            other => HarnessError::Internal(other.to_string()),
        }
    }
}

/// Independent random streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Teacher = 1,
    DatasetInputs = 2,
    Input = 3,
    Target = 4,
    Verify = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> NoiseRng {
    let mut rng = NoiseRng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Runs `f` on a dedicated pool of `jobs` threads, or on the global pool when `None`.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(ConfigError::new("jobs", "must be >= 1").into()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| HarnessError::Internal(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}
