//! The toy categorical policy and its context features.

use serde::{Deserialize, Serialize};

use crate::buffer::{ContextState, TaskKind};
use crate::grpo::GrpoError;
use rand::Rng;

/// Total context feature dimension: kind one-hot (3) + difficulty (1) +
/// depth bucket one-hot (4) + last score (1) + normalized history length (1).
pub const FEATURE_DIM: usize = 10;

const DEPTH_BUCKETS: usize = 4;

/// Structured surrogate for the context fed to the policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextFeatures {
    values: [f64; FEATURE_DIM],
}

impl ContextFeatures {
    /// Builds the feature vector from raw components.
    ///
    /// `last_score` is the score of the most recent execution, `-1.0` when
    /// there is none (or it failed).
    pub fn new(kind: TaskKind, difficulty: f64, depth: usize, last_score: f64) -> Self {
        let mut values = [0.0; FEATURE_DIM];
        values[kind.index()] = 1.0;
        values[3] = difficulty;
        let bucket = match depth {
            0 => 0,
            1 => 1,
            2..=3 => 2,
            _ => 3,
        };
        values[4 + bucket] = 1.0;
        values[4 + DEPTH_BUCKETS] = last_score;
        values[5 + DEPTH_BUCKETS] = (depth as f64 / 8.0).min(1.0);
        Self { values }
    }

    /// Features of a stored context state; `difficulty` comes from the task
    /// instance the state belongs to.
    pub fn from_state(state: &ContextState, difficulty: f64) -> Self {
        let last_score = state.history.last().map_or(-1.0, |entry| entry.score);
        Self::new(state.kind, difficulty, state.depth(), last_score)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Linear-softmax policy over K discrete action-quality levels.
///
/// Keeps a frozen copy of its initial parameters as the KL reference, and a
/// version counter bumped once per learner update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    /// Row-major `K x FEATURE_DIM` weight matrix.
    params: Vec<f64>,
    actions: usize,
    version: u64,
    reference_params: Vec<f64>,
}

impl ToyPolicy {
    /// Zero-initialized policy: uniform over actions everywhere.
    pub fn new(actions: usize) -> Result<Self, GrpoError> {
        if actions < 2 {
            return Err(GrpoError::InvalidParams(format!(
                "need at least two actions, got {actions}"
            )));
        }
        let params = vec![0.0; actions * FEATURE_DIM];
        Ok(Self {
            reference_params: params.clone(),
            params,
            actions,
            version: 0,
        })
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    fn check_features(&self, features: &ContextFeatures) -> Result<(), GrpoError> {
        if !features.is_finite() {
            return Err(GrpoError::NonFinite("features"));
        }
        Ok(())
    }

    fn logits_from(params: &[f64], actions: usize, features: &ContextFeatures) -> Vec<f64> {
        let phi = features.as_slice();
        (0..actions)
            .map(|a| {
                let row = &params[a * FEATURE_DIM..(a + 1) * FEATURE_DIM];
                row.iter().zip(phi).map(|(w, x)| w * x).sum()
            })
            .collect()
    }

    pub fn logits(&self, features: &ContextFeatures) -> Result<Vec<f64>, GrpoError> {
        self.check_features(features)?;
        Ok(Self::logits_from(&self.params, self.actions, features))
    }

    /// Action probabilities at temperature 1.
    pub fn action_distribution(&self, features: &ContextFeatures) -> Result<Vec<f64>, GrpoError> {
        self.action_distribution_with_temperature(features, 1.0)
    }

    /// Action probabilities with the logits divided by `temperature`.
    pub fn action_distribution_with_temperature(
        &self,
        features: &ContextFeatures,
        temperature: f64,
    ) -> Result<Vec<f64>, GrpoError> {
        if !(temperature > 0.0) {
            return Err(GrpoError::InvalidParams(format!(
                "temperature {temperature} must be positive"
            )));
        }
        let logits = self.logits(features)?;
        Ok(softmax(&logits, temperature))
    }

    /// Log-probability of `action` at temperature 1. Ratios and KL terms are
    /// always evaluated at temperature 1; the sampling temperature applies
    /// only to rollout draws.
    pub fn log_prob(&self, features: &ContextFeatures, action: usize) -> Result<f64, GrpoError> {
        self.check_action(action)?;
        let logits = self.logits(features)?;
        Ok(log_softmax(&logits)[action])
    }

    /// Log-probability of `action` under the frozen reference policy.
    pub fn ref_log_prob(
        &self,
        features: &ContextFeatures,
        action: usize,
    ) -> Result<f64, GrpoError> {
        self.check_action(action)?;
        self.check_features(features)?;
        let logits = Self::logits_from(&self.reference_params, self.actions, features);
        Ok(log_softmax(&logits)[action])
    }

    /// Exact entropy of the categorical action distribution (nats).
    pub fn entropy(&self, features: &ContextFeatures) -> Result<f64, GrpoError> {
        let probs = self.action_distribution(features)?;
        Ok(-probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>())
    }

    /// Samples an action at the given temperature and returns it together
    /// with its temperature-1 log-probability.
    pub fn sample_action(
        &self,
        features: &ContextFeatures,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<(usize, f64), GrpoError> {
        let probs = self.action_distribution_with_temperature(features, temperature)?;
        let mut target = rng.random::<f64>();
        let mut action = probs.len() - 1;
        for (i, &p) in probs.iter().enumerate() {
            target -= p;
            if target <= 0.0 {
                action = i;
                break;
            }
        }
        let log_prob = self.log_prob(features, action)?;
        Ok((action, log_prob))
    }

    fn check_action(&self, action: usize) -> Result<(), GrpoError> {
        if action >= self.actions {
            return Err(GrpoError::ActionOutOfRange {
                action,
                actions: self.actions,
            });
        }
        Ok(())
    }
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits
        .iter()
        .map(|&l| (l - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|&l| l - log_sum).collect()
}
