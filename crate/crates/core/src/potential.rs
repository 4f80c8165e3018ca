//! Learnability potential derived from group reward statistics.
//!
//! The potential of a state combines the dispersion of its most recent
//! rollout group (a direct proxy for the group-relative gradient magnitude)
//! with the remaining improvement headroom:
//!
//! ```text
//! P = u * clip(sigma, 0, d_max) + l * clip(1 - mu, 0, 1)
//! ```
//!
//! where `mu` and `sigma` are the group mean and population standard
//! deviation. Groups that are constant at reward 1 (solved) score exactly 0;
//! groups constant at 0 (currently intractable) sit at the `l` floor; mixed
//! groups near the capability frontier score highest.
//!
//! Potentials are overwritten — not averaged — each time a state is rolled
//! out, so they always describe the most recent evidence.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{BufferError, EvolvingBuffer, StateId};

#[derive(Debug, Error, PartialEq)]
pub enum PotentialError {
    #[error("reward group needs at least two rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("group reward {0} outside [0, 1]")]
    RewardOutOfRange(f64),
    #[error("invalid potential parameters: {0}")]
    InvalidParams(String),
}

/// Parameters of the learnability potential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PotentialParams {
    /// Weight of the group-dispersion (uncertainty) term.
    pub uncertainty_weight: f64,
    /// Weight of the improvement-headroom term.
    pub headroom_weight: f64,
    /// Clip bound on the dispersion term.
    pub std_clip: f64,
    /// Potential assigned to states that have never been rolled out.
    pub p_init: f64,
}

impl Default for PotentialParams {
    fn default() -> Self {
        Self {
            uncertainty_weight: 0.5,
            headroom_weight: 0.5,
            std_clip: 1.0,
            p_init: 0.05,
        }
    }
}

impl PotentialParams {
    pub fn validate(&self) -> Result<(), PotentialError> {
        let checks = [
            (self.uncertainty_weight >= 0.0, "uncertainty_weight >= 0"),
            (self.headroom_weight >= 0.0, "headroom_weight >= 0"),
            (self.std_clip > 0.0, "std_clip > 0"),
            (self.p_init >= 0.0, "p_init >= 0"),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(PotentialError::InvalidParams(what.to_string()));
            }
        }
        Ok(())
    }
}

/// The shaped rewards of one rollout group.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardGroup {
    rewards: Vec<f64>,
}

impl RewardGroup {
    pub fn new(rewards: Vec<f64>) -> Result<Self, PotentialError> {
        if rewards.len() < 2 {
            return Err(PotentialError::GroupTooSmall(rewards.len()));
        }
        for &r in &rewards {
            if !(0.0..=1.0).contains(&r) {
                return Err(PotentialError::RewardOutOfRange(r));
            }
        }
        Ok(Self { rewards })
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Group mean and population standard deviation (divisor `G`, not `G - 1`).
pub fn group_mean_std(group: &RewardGroup) -> (f64, f64) {
    let n = group.rewards.len() as f64;
    let mean = group.rewards.iter().sum::<f64>() / n;
    let variance = group
        .rewards
        .iter()
        .map(|r| (r - mean) * (r - mean))
        .sum::<f64>()
        / n;
    (mean, variance.sqrt())
}

/// Learnability potential of a rollout group.
pub fn potential(group: &RewardGroup, params: &PotentialParams) -> f64 {
    let (mean, std) = group_mean_std(group);
    let uncertainty = std.clamp(0.0, params.std_clip);
    let headroom = (1.0 - mean).clamp(0.0, 1.0);
    params.uncertainty_weight * uncertainty + params.headroom_weight * headroom
}

/// Overwrites the state's potential with the value implied by its most
/// recent rollout group. Returns the new potential.
pub fn update_potential(
    buffer: &EvolvingBuffer,
    state_id: StateId,
    group: &RewardGroup,
    params: &PotentialParams,
) -> Result<f64, BufferError> {
    let value = potential(group, params);
    let (_, std) = group_mean_std(group);
    buffer.record_rollout_outcome(state_id, value, std)
}
