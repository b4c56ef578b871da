//! Minimal differentiable compute for the driving policy: 2-D tensors, a
//! reverse-mode tape, the scene encoder, policy/value heads, Beta
//! statistics, Adam and checkpoints.

pub mod action;
pub mod adam;
pub mod beta;
pub mod checkpoint;
pub mod error;
pub mod model;
pub mod params;
pub mod special;
pub mod tape;
pub mod tensor;

pub use action::{map_action, unmap_action, ActionRanges};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use beta::BetaParams;
pub use error::NeuroError;
pub use model::{EncoderConfig, HeadConfig, HeadMode, ModelConfig, PolicyOutput, TokenInput};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
