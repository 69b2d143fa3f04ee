//! Multi-agent PPO over the retrieval pipeline.
//!
//! Each agent makes one decision per episode. The generator is paid the
//! episode score; the planner and filter additionally earn the score gap
//! against a counterfactual episode in which their own contribution is
//! removed (degenerate label queries, and the filter bypass respectively).

mod pipeline;
mod ppo;
mod train;

pub use pipeline::{
    bypass_mask, degenerate_queries, merge_candidates, AblationFlags, AgentRecord, Candidate, EvidencePass,
    Pipeline, PipelineConfig, Trajectory,
};
pub use ppo::{
    clipped_surrogate, clipped_surrogate_of_ratio, clipped_value_loss, compute_rewards, gae, normalize,
    surrogate_value, terminal_reward_with_kl, value_loss_value,
};
pub use train::{
    batch_loss_and_grad, batch_targets, collect_batch, evaluate, mappo_iteration, EvalScores,
    IterationMetrics, Targets, TrainConfig, TrainState,
};

use thiserror::Error;

use crate::agents::AgentError;
use crate::envsynth::EnvError;
use crate::fusion::FusionError;
use crate::retrieval::RetrievalError;

#[derive(Debug, Error)]
pub enum MarlError {
    #[error("{what}: expected length {expected}, found {found}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("episode for sample {sample}: {msg}")]
    Episode { sample: u64, msg: String },
    #[error("non-finite training signal at iteration {iter}: {detail}")]
    NonFinite { iter: usize, detail: String },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

pub type Result<T> = std::result::Result<T, MarlError>;
