//! Core engine for step-wise reinforcement learning over an evolving task buffer.
//!
//! The crate is organized around six subsystems:
//!
//! - [`buffer`] — task instances, context states, the transition operator, and
//!   the append-only evolving buffer that stores every intermediate state.
//! - [`reward`] — leaderboard rank scores and the mixed absolute/relative
//!   shaped reward.
//! - [`potential`] — the learnability potential derived from group reward
//!   statistics, used to prioritize states near the learning frontier.
//! - [`sampler`] — the adaptive sampling distribution: rank-based focusing,
//!   type multipliers, revisit cooling, exploration mixing, and batch draws.
//! - [`grpo`] — group-relative advantages, the clipped surrogate loss with KL
//!   and entropy regularization, and the optimizer update for a small
//!   categorical policy.
//! - [`env`] — a fully synthetic execution environment: seeded task suites,
//!   stochastic execution outcomes, and simulated execution cost.
//!
//! All stochastic components draw from explicitly derived [`rng`] streams so
//! that identical seeds reproduce identical results bit-for-bit.

pub mod buffer;
pub mod env;
pub mod grpo;
pub mod potential;
pub mod reward;
pub mod rng;
pub mod sampler;

pub use buffer::{
    classify_kind, transition, ContextState, EvolvingBuffer, ExecFeedback, HistoryEntry,
    InstanceId, SolutionId, StateId, TaskInstance, TaskKind,
};
pub use env::{execute, make_task_suite, tick_cost, EnvParams, ExecOutcome, SyntheticTask};
pub use grpo::{
    advantages, grpo_loss, update, AdvantageGroup, ContextFeatures, GrpoParams, OptimizerParams,
    OptimizerState, ToyPolicy, TrainingSample, UpdateReport,
};
pub use potential::{group_mean_std, potential, update_potential, PotentialParams, RewardGroup};
pub use reward::{humanrank, prior_score, shaped_reward, LeaderboardRef, RewardParams};
pub use sampler::{
    base_weight, build_distribution, build_uniform_distribution, cooling, ranks_within_kind,
    sample_batch, CoolingParams, SamplerDiagnostics, SamplingDistribution, StageName, StageParams,
    StageSchedule, TypeWeights,
};
