//! Experiment driver: configuration records, result files, checkpoints and
//! the four commands behind the `cellgrade` binary.

mod checkpoint;
mod commands;
mod config;
mod output;

use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::knn::KnnError;
use crate::nn::NnError;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, CheckpointError, CheckpointFile, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use commands::{
    cmd_cnn_eval, cmd_cnn_train, cmd_knn, cmd_synth, EvalReport, KnnSummary, TrainSummary, CNN_CSV_HEADER,
    KNN_CSV_HEADER,
};
pub use config::{
    parse_k_list, CnnEvalConfig, CnnTrainConfig, EvalSplit, ExperimentConfig, KnnConfig, MetricName,
    SynthCommandConfig, ARTIFACT_VERSION,
};
pub use output::{config_header, write_atomic, CnnRecord, KnnRecord};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt checkpoint: {0}")]
    Integrity(#[from] CheckpointError),
}

impl HarnessError {
    /// Process exit status: 2 configuration, 3 data or I/O, 4 integrity.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) | HarnessError::Io { .. } => 3,
            HarnessError::Integrity(CheckpointError::Io { .. }) => 3,
            HarnessError::Integrity(_) => 4,
        }
    }
}

impl From<DataError> for HarnessError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(m) => HarnessError::Config(m),
            other => HarnessError::Data(other.to_string()),
        }
    }
}

impl From<KnnError> for HarnessError {
    fn from(e: KnnError) -> Self {
        match e {
            KnnError::DimensionMismatch { .. } => HarnessError::Data(e.to_string()),
            other => HarnessError::Config(other.to_string()),
        }
    }
}

impl From<NnError> for HarnessError {
    fn from(e: NnError) -> Self {
        HarnessError::Config(e.to_string())
    }
}
