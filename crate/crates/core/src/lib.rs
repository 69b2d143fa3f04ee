//! Multi-agent retrieval-augmented emotion recognition.
//!
//! Three cooperating policies (query planner, evidence filter, emotion
//! generator) share one trunk network and are trained end-to-end with
//! multi-agent PPO on a synthetic multimodal environment. Retrieved
//! perceptual evidence is injected through gated cross-attention and a
//! shared-routing mixture of experts before it reaches the generator.
//!
//! Module map:
//! - [`numerics`]: dense vectors/matrices, a reverse-mode tape, MLPs and a
//!   finite-difference gradient checker.
//! - [`envsynth`]: synthetic dataset and corpus generation, missing-modality
//!   masks and F1 scoring.
//! - [`retrieval`]: exact cosine k-NN over the evidence corpus.
//! - [`fusion`]: gated cross-attention fusion and modality-balancing MoE.
//! - [`agents`]: observations, policy heads, action sampling, SFT warm start.
//! - [`marl`]: the episode pipeline, counterfactual rewards, GAE and the
//!   MAPPO update.
//! - [`cli`]: run configuration, checkpoints, evaluation and ablation reports.

pub mod agents;
pub mod cli;
pub mod envsynth;
pub mod fusion;
pub mod marl;
pub mod numerics;
pub mod retrieval;

pub(crate) mod seeding;
