//! Run configuration, checkpoints and the `synth` / `train` / `eval` /
//! `suite` commands behind the binary.

mod checkpoint;
mod commands;
mod config;

pub use checkpoint::{Checkpoint, CheckpointHeader, CheckpointKind, FORMAT_VERSION};
pub use commands::{
    agent_evidence_conditions, cmd_eval, cmd_suite, cmd_synth, cmd_train, condition_name,
    evaluate_checkpoint, load_dataset, run_suite, save_dataset, train_stages, ConditionRow,
    CounterfactualGaps, EvalReport, MissingModalityRow, Scores, StageBundles, SuiteReport, SynthManifest,
    TrainSummary, Trainer, CORPUS_FILE, EVAL_CKPT, FINAL_CKPT, INIT_CKPT, SFT_CKPT, TEST_FILE, TRAIN_FILE,
};
pub use config::RunConfig;

use std::path::Path;

use thiserror::Error;

use crate::agents::AgentError;
use crate::envsynth::EnvError;
use crate::marl::MarlError;
use crate::retrieval::RetrievalError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Marl(#[from] MarlError),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Config(_) => "config",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Env(_) => "data",
            CliError::Retrieval(_) => "retrieval",
            CliError::Agent(_) => "agent",
            CliError::Marl(MarlError::NonFinite { .. }) => "non_finite",
            CliError::Marl(_) => "training",
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
