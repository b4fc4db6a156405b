//! Experiment harness: config loading, dataset ingestion, sweeps and
//! report bundles.

pub mod config;
pub mod data;
pub mod plan;

use thiserror::Error;

use crate::attacks::AttackError;
use crate::compressors::CompressError;
use crate::distsim::SimError;
use crate::metrics::MetricsError;
use crate::model::ModelError;

pub use config::{
    Config, DatasetConfig, DatasetKind, MiaConfig, ModelConfig, ModelKind, SweepConfig,
    TrainingConfig,
};
pub use data::{generate_synthetic, load_cifar10_bin, load_mnist_idx, SyntheticSpec};
pub use plan::{
    load_dataset, network_spec, render, run_plan, Algorithm, ExperimentPlan, Failure, Manifest,
    MiaRow, ReportBundle, SampleRecord, Setting,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config file not found: {path}")]
    MissingConfig { path: String },
    #[error("{origin}:{line}: {path}: {message}")]
    Config {
        origin: String,
        line: usize,
        path: String,
        message: String,
    },
    #[error("invalid config field {path}: {message}")]
    Invalid {
        path: String,
        line: Option<usize>,
        message: String,
    },
    #[error("{file}: malformed at byte {offset}: {message}")]
    Parse {
        file: String,
        offset: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}
