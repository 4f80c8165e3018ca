//! The adaptive sampling distribution over the evolving buffer.
//!
//! Construction pipeline, applied to an immutable buffer snapshot at outer
//! iteration `t`:
//!
//! 1. pick the stage parameters from the buffer size (early / mid / late);
//! 2. within each task kind, order states by potential (descending, ties by
//!    smaller depth then insertion order) and keep the top `top_percentile`
//!    fraction as candidates;
//! 3. re-rank the candidates of each kind to `[0, 1]` and weight them by the
//!    focusing law `(1 - rank)^rho`, floored at `min_weight_ratio`;
//! 4. multiply by the kind multiplier and the revisit cooling factor
//!    `C(x, t)`; hard-blocked states drop out of the support entirely;
//! 5. normalize, then mix with a uniform distribution over the eligible set
//!    using weight `exploration_eps`.
//!
//! The cooling factor enforces a refractory period after each visit and
//! applies a soft decaying penalty for older visits:
//!
//! ```text
//! C(x, t) = I(t - t_last > hard_block) * prod_k (1 - gamma * eta^(t - k))
//! ```
//!
//! Never-visited states cool to exactly 1 (empty product).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{BufferSnapshot, StateId, StateView, TaskKind};
use crate::rng::stream_rng;
use rand::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("snapshot contains no states")]
    EmptySnapshot,
    #[error("no eligible state: every candidate is hard-blocked at t = {t}")]
    NoEligibleState { t: u64 },
    #[error("batch of {requested} exceeds support of {support}")]
    BatchTooLarge { requested: usize, support: usize },
    #[error("invalid sampler parameters: {0}")]
    InvalidParams(String),
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Per-stage sampling controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    /// Exponent of the rank-based focusing law; 0 is uniform over ranks.
    pub focusing_rho: f64,
    /// Floor on the base weight, relative to the maximum weight of 1.
    pub min_weight_ratio: f64,
    /// Fraction of probability mass mixed uniformly over eligible states.
    pub exploration_eps: f64,
    /// Fraction of each kind (by potential rank) admitted as candidates.
    pub top_percentile: f64,
    /// Minimum number of iterations before a visited state may be resampled.
    pub hard_block: u64,
}

impl StageParams {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let checks = [
            (self.focusing_rho >= 0.0, "focusing_rho >= 0"),
            (
                self.min_weight_ratio > 0.0 && self.min_weight_ratio <= 1.0,
                "min_weight_ratio in (0, 1]",
            ),
            (
                (0.0..=1.0).contains(&self.exploration_eps),
                "exploration_eps in [0, 1]",
            ),
            (
                self.top_percentile > 0.0 && self.top_percentile <= 1.0,
                "top_percentile in (0, 1]",
            ),
            (self.hard_block >= 1, "hard_block >= 1"),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(SamplerError::InvalidParams(what.to_string()));
            }
        }
        Ok(())
    }
}

/// Which stage of the schedule is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Early,
    Mid,
    Late,
}

impl std::fmt::Display for StageName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StageName::Early => "early",
            StageName::Mid => "mid",
            StageName::Late => "late",
        };
        f.write_str(s)
    }
}

/// Buffer-size-driven three-stage schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSchedule {
    pub early: StageParams,
    pub mid: StageParams,
    pub late: StageParams,
    /// Buffer sizes at which the mid and late stages begin.
    pub thresholds: (usize, usize),
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            early: StageParams {
                focusing_rho: 2.0,
                min_weight_ratio: 0.01,
                exploration_eps: 0.2,
                top_percentile: 1.0,
                hard_block: 1,
            },
            mid: StageParams {
                focusing_rho: 3.5,
                min_weight_ratio: 0.005,
                exploration_eps: 0.15,
                top_percentile: 1.0,
                hard_block: 2,
            },
            late: StageParams {
                focusing_rho: 5.0,
                min_weight_ratio: 0.001,
                exploration_eps: 0.1,
                top_percentile: 0.4,
                hard_block: 3,
            },
            thresholds: (200, 1000),
        }
    }
}

impl StageSchedule {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.thresholds.0 >= self.thresholds.1 {
            return Err(SamplerError::InvalidParams(format!(
                "stage thresholds must be strictly increasing, got {:?}",
                self.thresholds
            )));
        }
        self.early.validate()?;
        self.mid.validate()?;
        self.late.validate()
    }

    pub fn stage_name_for(&self, buffer_size: usize) -> StageName {
        if buffer_size < self.thresholds.0 {
            StageName::Early
        } else if buffer_size < self.thresholds.1 {
            StageName::Mid
        } else {
            StageName::Late
        }
    }

    pub fn params_for(&self, name: StageName) -> &StageParams {
        match name {
            StageName::Early => &self.early,
            StageName::Mid => &self.mid,
            StageName::Late => &self.late,
        }
    }
}

/// Stage parameters active at the given buffer size.
pub fn stage_for(buffer_size: usize, schedule: &StageSchedule) -> &StageParams {
    schedule.params_for(schedule.stage_name_for(buffer_size))
}

/// Parameters of the revisit cooling factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoolingParams {
    /// Base penalty applied per recorded visit.
    pub gamma: f64,
    /// Exponential decay of the penalty with visit age.
    pub eta: f64,
}

impl Default for CoolingParams {
    fn default() -> Self {
        Self {
            gamma: 0.3,
            eta: 0.9,
        }
    }
}

impl CoolingParams {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(SamplerError::InvalidParams(format!(
                "gamma {} outside [0, 1)",
                self.gamma
            )));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(SamplerError::InvalidParams(format!(
                "eta {} outside (0, 1)",
                self.eta
            )));
        }
        Ok(())
    }
}

/// Sampling-weight multipliers per task kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TypeWeights {
    pub draft_multiplier: f64,
    pub debug_multiplier: f64,
    pub improve_multiplier: f64,
}

impl Default for TypeWeights {
    fn default() -> Self {
        Self {
            draft_multiplier: 2.0,
            debug_multiplier: 1.0,
            improve_multiplier: 1.0,
        }
    }
}

impl TypeWeights {
    pub fn for_kind(&self, kind: TaskKind) -> f64 {
        match kind {
            TaskKind::Draft => self.draft_multiplier,
            TaskKind::Debug => self.debug_multiplier,
            TaskKind::Improve => self.improve_multiplier,
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        for (value, what) in [
            (self.draft_multiplier, "draft_multiplier"),
            (self.debug_multiplier, "debug_multiplier"),
            (self.improve_multiplier, "improve_multiplier"),
        ] {
            if !(value > 0.0) {
                return Err(SamplerError::InvalidParams(format!(
                    "{what} must be positive, got {value}"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Distribution
// ---------------------------------------------------------------------------

/// A normalized sampling distribution over eligible states.
///
/// `ids` and `probs` are parallel, ordered by buffer insertion, and cover
/// only states with strictly positive probability.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingDistribution {
    pub ids: Vec<StateId>,
    pub probs: Vec<f64>,
}

impl SamplingDistribution {
    pub fn support_size(&self) -> usize {
        self.ids.len()
    }

    pub fn prob_of(&self, id: StateId) -> Option<f64> {
        self.ids
            .iter()
            .position(|&x| x == id)
            .map(|i| self.probs[i])
    }

    /// Shannon entropy (nats).
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// Checks non-negativity and normalization to `tol`.
    pub fn check_normalized(&self, tol: f64) -> bool {
        self.probs.iter().all(|&p| p >= 0.0)
            && (self.probs.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

fn kind_order(views: &[StateView], members: &mut [usize]) {
    members.sort_unstable_by(|&a, &b| {
        let (va, vb) = (&views[a], &views[b]);
        vb.potential
            .total_cmp(&va.potential)
            .then(va.depth.cmp(&vb.depth))
            .then(va.insertion.cmp(&vb.insertion))
    });
}

fn per_kind_members(views: &[StateView]) -> [Vec<usize>; 3] {
    let mut members: [Vec<usize>; 3] = Default::default();
    for (i, view) in views.iter().enumerate() {
        members[view.kind.index()].push(i);
    }
    for m in &mut members {
        kind_order(views, m);
    }
    members
}

fn rank_of_position(position: usize, total: usize) -> f64 {
    if total <= 1 {
        0.0
    } else {
        position as f64 / (total - 1) as f64
    }
}

/// Normalized potential rank of every state within its own kind.
///
/// The highest-potential state of each kind gets rank 0, the lowest rank 1;
/// a kind with a single state gets rank 0. Ties break towards smaller depth,
/// then earlier insertion.
pub fn ranks_within_kind(snapshot: &BufferSnapshot) -> HashMap<StateId, f64> {
    let views = &snapshot.views;
    let mut ranks = HashMap::with_capacity(views.len());
    for members in per_kind_members(views) {
        let n = members.len();
        for (pos, &idx) in members.iter().enumerate() {
            ranks.insert(views[idx].state_id, rank_of_position(pos, n));
        }
    }
    ranks
}

/// Rank-based base weight `(1 - rank)^rho`, floored at `min_weight_ratio`.
pub fn base_weight(rank_norm: f64, stage: &StageParams) -> f64 {
    debug_assert!((0.0..=1.0).contains(&rank_norm));
    (1.0 - rank_norm)
        .powf(stage.focusing_rho)
        .max(stage.min_weight_ratio)
}

/// Revisit cooling factor at iteration `t`.
///
/// Zero while the state is inside the hard-block window after its latest
/// visit; otherwise the product of soft penalties over all recorded visits.
/// Never-visited states return exactly 1.
pub fn cooling(visit_times: &[u64], t: u64, stage: &StageParams, cp: &CoolingParams) -> f64 {
    match visit_times.last() {
        None => 1.0,
        Some(&last) => {
            if t.saturating_sub(last) <= stage.hard_block {
                return 0.0;
            }
            visit_times
                .iter()
                .map(|&k| 1.0 - cp.gamma * cp.eta.powf((t - k) as f64))
                .product()
        }
    }
}

/// Builds the adaptive sampling distribution on a buffer snapshot.
pub fn build_distribution(
    snapshot: &BufferSnapshot,
    t: u64,
    schedule: &StageSchedule,
    cp: &CoolingParams,
    tw: &TypeWeights,
) -> Result<SamplingDistribution, SamplerError> {
    schedule.validate()?;
    cp.validate()?;
    tw.validate()?;
    let views = &snapshot.views;
    if views.is_empty() {
        return Err(SamplerError::EmptySnapshot);
    }
    let stage = stage_for(views.len(), schedule);

    let mut weighted: Vec<(usize, f64)> = Vec::new();
    for members in per_kind_members(views) {
        if members.is_empty() {
            continue;
        }
        let keep = ((stage.top_percentile * members.len() as f64).ceil() as usize)
            .clamp(1, members.len());
        for (pos, &idx) in members[..keep].iter().enumerate() {
            let view = &views[idx];
            let w = base_weight(rank_of_position(pos, keep), stage)
                * tw.for_kind(view.kind)
                * cooling(&view.visit_times, t, stage, cp);
            if w > 0.0 {
                weighted.push((idx, w));
            }
        }
    }
    if weighted.is_empty() {
        return Err(SamplerError::NoEligibleState { t });
    }
    weighted.sort_unstable_by_key(|&(idx, _)| views[idx].insertion);

    let z: f64 = weighted.iter().map(|&(_, w)| w).sum();
    let eps = stage.exploration_eps;
    let uniform = 1.0 / weighted.len() as f64;
    let (ids, probs) = weighted
        .into_iter()
        .map(|(idx, w)| (views[idx].state_id, (1.0 - eps) * (w / z) + eps * uniform))
        .unzip();
    Ok(SamplingDistribution { ids, probs })
}

/// Uniform baseline distribution over all non-hard-blocked states.
///
/// Used by the sampling ablation: the focusing law, type multipliers, soft
/// cooling, and percentile filter are all dropped, but the hard revisit
/// block is kept.
pub fn build_uniform_distribution(
    snapshot: &BufferSnapshot,
    t: u64,
    schedule: &StageSchedule,
) -> Result<SamplingDistribution, SamplerError> {
    schedule.validate()?;
    let views = &snapshot.views;
    if views.is_empty() {
        return Err(SamplerError::EmptySnapshot);
    }
    let stage = stage_for(views.len(), schedule);
    let ids: Vec<StateId> = views
        .iter()
        .filter(|view| {
            view.visit_times
                .last()
                .is_none_or(|&last| t.saturating_sub(last) > stage.hard_block)
        })
        .map(|view| view.state_id)
        .collect();
    if ids.is_empty() {
        return Err(SamplerError::NoEligibleState { t });
    }
    let p = 1.0 / ids.len() as f64;
    let probs = vec![p; ids.len()];
    Ok(SamplingDistribution { ids, probs })
}

/// Draws `k` distinct states, proportional to the distribution via
/// sequential renormalization. Deterministic for a fixed seed.
pub fn sample_batch(
    dist: &SamplingDistribution,
    k: usize,
    rng_seed: u64,
) -> Result<Vec<StateId>, SamplerError> {
    let support = dist.support_size();
    if k > support {
        return Err(SamplerError::BatchTooLarge {
            requested: k,
            support,
        });
    }
    let mut rng = stream_rng(rng_seed, "sample-batch", 0, 0);
    let mut remaining = dist.probs.clone();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = remaining.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut chosen = None;
        for (i, &w) in remaining.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            target -= w;
            if target <= 0.0 {
                chosen = Some(i);
                break;
            }
        }
        // Fall back to the last positive entry if rounding pushed us past the end.
        let i = chosen.unwrap_or_else(|| {
            remaining
                .iter()
                .rposition(|&w| w > 0.0)
                .expect("support is non-empty")
        });
        picked.push(dist.ids[i]);
        remaining[i] = 0.0;
    }
    Ok(picked)
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

/// Per-iteration summary of the sampling distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerDiagnostics {
    pub stage: StageName,
    pub support: usize,
    pub entropy: f64,
    /// Probability mass on states whose latest rollout group had positive
    /// reward dispersion — the current learning frontier.
    pub frontier_mass: f64,
}

impl SamplerDiagnostics {
    pub fn compute(
        dist: &SamplingDistribution,
        snapshot: &BufferSnapshot,
        schedule: &StageSchedule,
    ) -> Self {
        let frontier: std::collections::HashSet<StateId> = snapshot
            .views
            .iter()
            .filter(|v| v.last_group_std.is_some_and(|s| s > 0.0))
            .map(|v| v.state_id)
            .collect();
        let frontier_mass = dist
            .ids
            .iter()
            .zip(&dist.probs)
            .filter(|(id, _)| frontier.contains(id))
            .map(|(_, &p)| p)
            .sum();
        Self {
            stage: schedule.stage_name_for(snapshot.len()),
            support: dist.support_size(),
            entropy: dist.entropy(),
            frontier_mass,
        }
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
