//! Group-relative policy optimization for a small categorical policy.
//!
//! The policy is a linear map from context features to logits over K
//! discrete action-quality levels — a differentiable stand-in for the
//! response generator. Rewards collected in groups of G rollouts per
//! starting state are normalized within the group:
//!
//! ```text
//! A_i = (r_i - mu) / (sigma + eps)
//! ```
//!
//! and optimized through the clipped ratio surrogate with KL regularization
//! towards a frozen reference policy and a small entropy bonus. The loss,
//! its exact gradient, and the optimizer step are all implemented in plain
//! f64 so updates are reproducible bit-for-bit.

mod loss;
mod optim;
mod policy;

pub use loss::{advantages, grpo_loss, AdvantageGroup, GrpoLoss, GrpoParams};
pub use optim::{update, OptimizerParams, OptimizerState, TrainingSample, UpdateReport};
pub use policy::{ContextFeatures, ToyPolicy, FEATURE_DIM};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GrpoError {
    #[error("group needs at least two rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("log-prob lists must all have the group length {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("feature vector has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("action index {action} out of range for {actions} actions")]
    ActionOutOfRange { action: usize, actions: usize },
    #[error("batch must be non-empty")]
    EmptyBatch,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}
