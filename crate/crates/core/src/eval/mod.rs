//! Metrics, experiment configuration and orchestration, sweeps and trace
//! rendering.

mod config;
mod experiment;
mod metrics;
mod viz;

pub use config::{ExperimentConfig, SynthPreset, PROTOCOL_HORIZONS, PROTOCOL_LOOKBACKS};
pub use experiment::{
    collect_traces, evaluate_checkpoint, evaluate_report, plugin_bench, prepare_data, read_json,
    run_ablation, run_experiment, run_seeds, sweep, write_artifacts, write_json, AblationRow,
    AblationTable, PluginRow, PluginTable, PreparedData, RunOutcome, RunSummary, SeedSummary,
    SelectBy, SweepParam, SweepRow, SweepTable, TraceRecord, TraceScores, CHECKPOINT_STEM,
    METRICS_FILE, RUN_FILE,
};
pub use metrics::{mean_std, metrics, MetricAccumulator, MetricReport, StepMetrics};
pub use viz::{attach_source, render_svg, viz_trace};

use thiserror::Error;

use crate::data::DataError;
use crate::models::ModelError;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Config(String),
    #[error("unknown config key `{key}`; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },
    #[error("`{key}` = `{value}`: expected {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: String,
    },
    #[error("{0}")]
    Protocol(String),
    #[error("unknown sweep parameter `{name}`; valid: {valid}")]
    UnknownSweepParam { name: String, valid: String },
    #[error("prediction shape {prediction:?} does not match target shape {target:?}")]
    Misaligned {
        prediction: Vec<usize>,
        target: Vec<usize>,
    },
    #[error("trace: {0}")]
    Trace(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl EvalError {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) | Self::BadValue { .. } => "config",
            Self::UnknownKey { .. } => "unknown_key",
            Self::Protocol(_) => "protocol",
            Self::UnknownSweepParam { .. } => "unknown_sweep_parameter",
            Self::Misaligned { .. } => "misaligned",
            Self::Trace(_) => "trace",
            Self::Io { .. } => "io",
            Self::Json(_) => "json",
            Self::Data(_) => "data",
            Self::Model(_) => "model",
            Self::Train(TrainError::Diverged { .. }) => "diverged",
            Self::Train(TrainError::OutOfMemory { .. }) => "out_of_memory",
            Self::Train(_) => "train",
        }
    }
}
