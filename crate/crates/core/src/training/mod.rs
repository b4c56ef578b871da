//! Imitation and reinforcement learning on top of the simulator.

mod gae;
mod il;
mod policy;
mod ppo;

use chauffeur_neuro::NeuroError;
use thiserror::Error;

pub use gae::gae;
pub use il::{build_il_dataset, il_loss, train_il, ILConfig, IlLoss, IlOutcome};
pub use policy::{evaluate, run_episode, ActionSpace, OutputNorm, Policy, PolicyKind};
pub use ppo::{
    collect_rollouts, normalize_advantages, ppo_loss_values, train_ppo, Env, PPOConfig, PpoLoss, PpoOutcome,
    RolloutBuffer, RolloutStep, WaveLog,
};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("no scenarios given")]
    NoScenarios,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Neuro(#[from] NeuroError),
}
