//! Experiment orchestration: configs, datasets, runs, CSV output.

pub mod config;
pub mod data;
pub mod run;
pub mod tables;

use thiserror::Error;

use crate::nn::NnError;
use crate::optim::OptimError;
use crate::parallel::SimError;
use crate::perfmodel::PerfError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("config error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, message: String },
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: String,
        offset: usize,
        message: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("csv error: {0}")]
    Csv(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Perf(#[from] PerfError),
}

impl From<NnError> for HarnessError {
    fn from(e: NnError) -> Self {
        HarnessError::Sim(SimError::Nn(e))
    }
}

impl From<OptimError> for HarnessError {
    fn from(e: OptimError) -> Self {
        HarnessError::Sim(SimError::Optim(e))
    }
}

impl HarnessError {
    /// Process exit status: 4 for configuration problems (including unknown presets), 5 for malformed or
    /// invalid input data, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } | HarnessError::Perf(PerfError::UnknownPreset { .. }) => EXIT_CONFIG,
            HarnessError::Format { .. } | HarnessError::Validation(_) => EXIT_FORMAT,
            _ => EXIT_FAILURE,
        }
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;
pub const EXIT_FORMAT: i32 = 5;
