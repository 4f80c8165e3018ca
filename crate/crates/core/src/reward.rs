//! Rank scores and the mixed absolute/relative shaped reward.
//!
//! A submission is scored by its rank among `N` synthetic leaderboard
//! participants: `s = 1 - p/N`, where `p` is the 1-based rank. Invalid
//! submissions score exactly `-1`. The shaped reward blends the absolute
//! score with the clamped relative improvement over the state's inherited
//! baseline `s_p`:
//!
//! ```text
//! R(s, s_p) = 0                                                  if s = -1
//!           = (1 - a) * s + a * max(0, (s - s_p) / (1 - s_p + e))  otherwise
//! ```
//!
//! The relative term pays for consuming the remaining improvement headroom,
//! so the incentive shifts from "produce anything valid" early on to
//! "beat your own baseline" once scores saturate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{ContextState, TaskKind};

/// Score assigned to invalid submissions.
pub const INVALID_SCORE: f64 = -1.0;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("leaderboard must contain at least one participant")]
    EmptyLeaderboard,
    #[error("leaderboard scores must be finite")]
    NonFiniteLeaderboard,
    #[error("score {0} must be -1 or in [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("baseline {0} must lie in [0, 1); the headroom denominator degenerates")]
    BaselineOutOfRange(f64),
    #[error("invalid reward parameters: {0}")]
    InvalidParams(String),
}

/// Parameters of the shaped reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardParams {
    /// Weight of the relative-improvement term.
    pub alpha_improve: f64,
    /// Stability constant in the headroom denominator.
    pub epsilon_stab: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            alpha_improve: 0.3,
            epsilon_stab: 1e-6,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(0.0..=1.0).contains(&self.alpha_improve) {
            return Err(RewardError::InvalidParams(format!(
                "alpha_improve {} outside [0, 1]",
                self.alpha_improve
            )));
        }
        if !(self.epsilon_stab > 0.0) {
            return Err(RewardError::InvalidParams(format!(
                "epsilon_stab {} must be positive",
                self.epsilon_stab
            )));
        }
        Ok(())
    }
}

/// A frozen synthetic leaderboard: participant scores sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRef {
    scores: Vec<f64>,
}

impl LeaderboardRef {
    /// Builds a leaderboard from participant scores (sorted internally).
    pub fn new(mut scores: Vec<f64>) -> Result<Self, RewardError> {
        if scores.is_empty() {
            return Err(RewardError::EmptyLeaderboard);
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(RewardError::NonFiniteLeaderboard);
        }
        scores.sort_by(f64::total_cmp);
        Ok(Self { scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

/// Rank score of a submission against a leaderboard.
///
/// A negative `score` marks an invalid submission and returns exactly `-1`.
/// Otherwise the submission takes rank `p = 1 + #(participants strictly
/// better)`, capped at `N` (it displaces the worst participant at minimum,
/// and ties count in the submission's favor), giving `1 - p/N` in
/// `[0, 1 - 1/N]`.
pub fn humanrank(score: f64, board: &LeaderboardRef) -> f64 {
    if score < 0.0 {
        return INVALID_SCORE;
    }
    let n = board.scores.len();
    let at_or_below = board.scores.partition_point(|&h| h <= score);
    let strictly_better = n - at_or_below;
    let p = (1 + strictly_better).min(n);
    1.0 - p as f64 / n as f64
}

/// Baseline score `s_p` inherited by a state.
///
/// Draft states start from zero; other states inherit the most recent
/// successful score in their history, falling back to zero when every prior
/// execution failed.
pub fn prior_score(state: &ContextState) -> f64 {
    if state.kind == TaskKind::Draft {
        return 0.0;
    }
    state
        .history
        .iter()
        .rev()
        .find(|entry| entry.score >= 0.0)
        .map_or(0.0, |entry| entry.score)
}

/// Shaped reward mixing absolute score and clamped relative improvement.
pub fn shaped_reward(s: f64, s_p: f64, params: &RewardParams) -> Result<f64, RewardError> {
    params.validate()?;
    if s == INVALID_SCORE {
        return Ok(0.0);
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(RewardError::ScoreOutOfRange(s));
    }
    if !(0.0..1.0).contains(&s_p) {
        return Err(RewardError::BaselineOutOfRange(s_p));
    }
    let alpha = params.alpha_improve;
    let improvement = ((s - s_p) / (1.0 - s_p + params.epsilon_stab)).max(0.0);
    Ok((1.0 - alpha) * s + alpha * improvement)
}
