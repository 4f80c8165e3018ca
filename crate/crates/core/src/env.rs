//! Synthetic execution environment.
//!
//! Stands in for real ML-engineering pipelines at desk scale: each task has
//! a latent difficulty, a fragility (base failure rate), a performance
//! ceiling, and a frozen 100-entry synthetic leaderboard. Executing an
//! action of quality `q` from a state of kind `kappa`:
//!
//! - fails with probability
//!   `clamp(fragility + difficulty * (1 - q) - rescue, 0, 0.95)`, where
//!   `rescue = debug_rescue_bonus * q` on Debug states and 0 otherwise;
//! - on success produces raw performance
//!   `clamp(ceiling * (q * (1 - 0.5 * difficulty) + improve_gain * prior), 0, ceiling)`
//!   plus Gaussian noise, where `prior` is the inherited baseline score on
//!   Improve states and 0 otherwise; the performance is then converted to a
//!   rank score against the task's leaderboard;
//! - failures score exactly -1 and abort early, so they draw their
//!   simulated latency from a distribution with half the mean.
//!
//! Leaderboards place a difficulty-determined share of participants above
//! the ceiling, so rank scores of successful runs never exceed it.

use std::io::{self, BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{
    ContextState, ErrorClass, ExecFeedback, InstanceId, LeaderboardId, MetricId, TaskInstance,
    TaskKind,
};
use crate::reward::{humanrank, prior_score, LeaderboardRef};
use crate::rng::stream_rng;

/// Participants per synthetic leaderboard.
pub const LEADERBOARD_SIZE: usize = 100;
/// Length of the task-description feature surrogate.
pub const DESCRIPTION_FEATURE_DIM: usize = 8;
/// Hard cap on the failure probability: no state is ever deterministically
/// hopeless.
pub const FAILURE_CAP: f64 = 0.95;
/// Version tag of the task-suite record file.
pub const SUITE_FORMAT_VERSION: u32 = 1;

/// Simulated latency range (ticks) of successful executions; failures use
/// half of both bounds.
const SUCCESS_TICKS: (f64, f64) = (8.0, 32.0);

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("task suite needs at least one task")]
    EmptySuite,
    #[error("action {action} out of range for {actions} quality levels")]
    InvalidAction { action: usize, actions: usize },
    #[error("invalid environment parameters: {0}")]
    InvalidParams(String),
    #[error("malformed suite file: {0}")]
    MalformedSuite(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One synthetic task: the instance plus its latent generative parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub instance: TaskInstance,
    /// Best attainable rank score; raw performance is capped here.
    pub ceiling: f64,
    pub difficulty: f64,
    /// Base failure probability.
    pub fragility: f64,
    pub leaderboard: LeaderboardRef,
}

/// Result of one simulated execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecOutcome {
    pub feedback: ExecFeedback,
    /// Rank score in `[0, 1]`, or exactly `-1` on failure.
    pub raw_score: f64,
    /// Simulated execution cost.
    pub latency_ticks: u32,
}

/// Environment knobs shared by every task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvParams {
    /// Solution quality per action index, ascending.
    pub quality_levels: Vec<f64>,
    /// Standard deviation of the performance noise.
    pub noise_sigma: f64,
    /// Failure-probability reduction earned by quality on Debug states.
    pub debug_rescue_bonus: f64,
    /// Performance credit for the inherited baseline on Improve states.
    pub improve_gain: f64,
    /// Base seed for environment streams.
    pub rng_seed: u64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            quality_levels: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            noise_sigma: 0.04,
            debug_rescue_bonus: 0.35,
            improve_gain: 0.45,
            rng_seed: 0,
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.quality_levels.len() < 2 {
            return Err(EnvError::InvalidParams(
                "need at least two quality levels".into(),
            ));
        }
        if !self
            .quality_levels
            .windows(2)
            .all(|w| w[0] <= w[1] && (0.0..=1.0).contains(&w[0]) && (0.0..=1.0).contains(&w[1]))
        {
            return Err(EnvError::InvalidParams(
                "quality levels must be ascending within [0, 1]".into(),
            ));
        }
        for (value, what, lo, hi) in [
            (self.noise_sigma, "noise_sigma", 0.0, f64::INFINITY),
            (self.debug_rescue_bonus, "debug_rescue_bonus", 0.0, 1.0),
            (self.improve_gain, "improve_gain", 0.0, 1.0),
        ] {
            if !(value >= lo && value <= hi) {
                return Err(EnvError::InvalidParams(format!("{what} = {value}")));
            }
        }
        Ok(())
    }

    pub fn actions(&self) -> usize {
        self.quality_levels.len()
    }
}

// ---------------------------------------------------------------------------
// Suite construction
// ---------------------------------------------------------------------------

/// Builds `n` tasks, deterministic for a fixed seed.
///
/// Difficulties are stratified across `[0, 1]` (one draw per 1/n stratum),
/// ceilings span `[0.6, 0.95]`, and each task gets an independent frozen
/// leaderboard with `round((1 - ceiling) * N)` participants placed above
/// the ceiling so that rank scores of capped performances stay below it.
pub fn make_task_suite(n: usize, seed: u64) -> Result<Vec<SyntheticTask>, EnvError> {
    if n < 1 {
        return Err(EnvError::EmptySuite);
    }
    let mut tasks = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream_rng(seed, "task", i as u64, 0);
        let difficulty = (i as f64 + rng.random::<f64>()) / n as f64;
        let ceiling = rng.random_range(0.6..0.95);
        let fragility = rng.random_range(0.05..0.40);
        let above = ((1.0 - ceiling) * LEADERBOARD_SIZE as f64).round() as usize;
        let above = above.clamp(1, LEADERBOARD_SIZE - 1);
        let mut scores = Vec::with_capacity(LEADERBOARD_SIZE);
        for _ in 0..LEADERBOARD_SIZE - above {
            scores.push(rng.random::<f64>() * ceiling);
        }
        for _ in 0..above {
            scores.push(ceiling + rng.random::<f64>() * (1.0 - ceiling));
        }
        let leaderboard = LeaderboardRef::new(scores).expect("non-empty by construction");
        let description_features = (0..DESCRIPTION_FEATURE_DIM)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        tasks.push(SyntheticTask {
            instance: TaskInstance {
                id: InstanceId(i as u64),
                description_features,
                difficulty,
                metric_id: MetricId(0),
                leaderboard_id: LeaderboardId(i as u32),
            },
            ceiling,
            difficulty,
            fragility,
            leaderboard,
        });
    }
    Ok(tasks)
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

/// Closed-form failure probability for an action of the given quality.
pub fn failure_probability(
    task: &SyntheticTask,
    kind: TaskKind,
    quality: f64,
    env: &EnvParams,
) -> f64 {
    let rescue = if kind == TaskKind::Debug {
        env.debug_rescue_bonus * quality
    } else {
        0.0
    };
    (task.fragility + task.difficulty * (1.0 - quality) - rescue).clamp(0.0, FAILURE_CAP)
}

/// Deterministic part of the success performance, before noise and capping.
fn base_performance(
    task: &SyntheticTask,
    prior_progress: f64,
    quality: f64,
    env: &EnvParams,
) -> f64 {
    task.ceiling * (quality * (1.0 - 0.5 * task.difficulty) + env.improve_gain * prior_progress)
}

fn log_uniform_ticks(rng: &mut impl Rng, lo: f64, hi: f64) -> u32 {
    let x = (rng.random_range(lo.ln()..hi.ln())).exp();
    (x.round() as u32).max(1)
}

/// Simulates one execution of `action` from state `x` on `task`.
///
/// Draw order on the stream is fixed: failure coin, then either (error
/// class, detail code, latency) or (noise, latency).
pub fn execute(
    task: &SyntheticTask,
    x: &ContextState,
    action: usize,
    env: &EnvParams,
    rng: &mut impl Rng,
) -> Result<ExecOutcome, EnvError> {
    env.validate()?;
    let actions = env.actions();
    if action >= actions {
        return Err(EnvError::InvalidAction { action, actions });
    }
    let quality = env.quality_levels[action];
    let p_fail = failure_probability(task, x.kind, quality, env);

    if rng.random::<f64>() < p_fail {
        let error_class = if rng.random::<f64>() < 0.5 {
            ErrorClass::RuntimeError
        } else {
            ErrorClass::InvalidSubmission
        };
        let detail_code = rng.random_range(0..32u8);
        let latency_ticks = log_uniform_ticks(rng, SUCCESS_TICKS.0 / 2.0, SUCCESS_TICKS.1 / 2.0);
        return Ok(ExecOutcome {
            feedback: ExecFeedback::failure(error_class, detail_code),
            raw_score: -1.0,
            latency_ticks,
        });
    }

    let prior_progress = if x.kind == TaskKind::Improve {
        prior_score(x)
    } else {
        0.0
    };
    let noise: f64 =
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * env.noise_sigma;
    let performance =
        (base_performance(task, prior_progress, quality, env) + noise).clamp(0.0, task.ceiling);
    let raw_score = humanrank(performance, &task.leaderboard);
    let latency_ticks = log_uniform_ticks(rng, SUCCESS_TICKS.0, SUCCESS_TICKS.1);
    Ok(ExecOutcome {
        feedback: ExecFeedback::success(),
        raw_score,
        latency_ticks,
    })
}

/// Simulated cost of an outcome, charged against the global tick budget.
pub fn tick_cost(outcome: &ExecOutcome) -> u32 {
    outcome.latency_ticks
}

// ---------------------------------------------------------------------------
// Suite serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SuiteHeader {
    format: String,
    version: u32,
    seed: u64,
    tasks: usize,
}

/// Writes a suite as a line-delimited record file with a versioned header.
pub fn write_suite<W: Write>(tasks: &[SyntheticTask], seed: u64, mut w: W) -> Result<(), EnvError> {
    writeln!(
        w,
        "{}",
        serde_json::to_string(&SuiteHeader {
            format: "task-suite".into(),
            version: SUITE_FORMAT_VERSION,
            seed,
            tasks: tasks.len(),
        })
        .map_err(io::Error::other)?
    )?;
    for task in tasks {
        writeln!(
            w,
            "{}",
            serde_json::to_string(task).map_err(io::Error::other)?
        )?;
    }
    Ok(())
}

/// Reads a suite record file written by [`write_suite`].
pub fn read_suite<R: BufRead>(r: R) -> Result<(Vec<SyntheticTask>, u64), EnvError> {
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| EnvError::MalformedSuite("missing header".into()))??;
    let header: SuiteHeader = serde_json::from_str(&header_line)
        .map_err(|e| EnvError::MalformedSuite(format!("bad header: {e}")))?;
    if header.format != "task-suite" || header.version != SUITE_FORMAT_VERSION {
        return Err(EnvError::MalformedSuite(format!(
            "unsupported format {}/{}",
            header.format, header.version
        )));
    }
    let mut tasks = Vec::with_capacity(header.tasks);
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        tasks.push(
            serde_json::from_str(&line)
                .map_err(|e| EnvError::MalformedSuite(format!("bad task record: {e}")))?,
        );
    }
    if tasks.len() != header.tasks {
        return Err(EnvError::MalformedSuite(format!(
            "expected {} tasks, found {}",
            header.tasks,
            tasks.len()
        )));
    }
    Ok((tasks, header.seed))
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::{transition, SolutionId, StateId};
    use crate::reward::{shaped_reward, RewardParams};

    fn draft_state() -> ContextState {
        ContextState::seed(StateId(0), InstanceId(0), 0.05)
    }

    fn debug_state() -> ContextState {
        transition(
            &draft_state(),
            StateId(1),
            SolutionId(0),
            ExecFeedback::failure(ErrorClass::RuntimeError, 1),
            -1.0,
            0.05,
        )
        .unwrap()
    }

    fn improve_state(score: f64) -> ContextState {
        transition(
            &draft_state(),
            StateId(1),
            SolutionId(0),
            ExecFeedback::success(),
            score,
            0.05,
        )
        .unwrap()
    }

    #[test]
    fn suite_is_reproducible_byte_for_byte() {
        let a = make_task_suite(134, 7).unwrap();
        let b = make_task_suite(134, 7).unwrap();
        assert_eq!(a.len(), 134);
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        write_suite(&a, 7, &mut buf_a).unwrap();
        write_suite(&b, 7, &mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
    }

    #[test]
    fn single_task_suite_has_full_leaderboard() {
        let suite = make_task_suite(1, 3).unwrap();
        assert_eq!(suite.len(), 1);
        assert_eq!(suite[0].leaderboard.len(), LEADERBOARD_SIZE);
        assert_eq!(
            suite[0].instance.description_features.len(),
            DESCRIPTION_FEATURE_DIM
        );
    }

    #[test]
    fn different_seeds_differ() {
        let a = make_task_suite(10, 1).unwrap();
        let b = make_task_suite(10, 2).unwrap();
        assert!(a
            .iter()
            .zip(&b)
            .any(|(ta, tb)| ta.difficulty != tb.difficulty));
    }

    #[test]
    fn difficulties_are_stratified() {
        let n = 50;
        let suite = make_task_suite(n, 11).unwrap();
        for (i, task) in suite.iter().enumerate() {
            assert!(task.difficulty >= i as f64 / n as f64);
            assert!(task.difficulty <= (i + 1) as f64 / n as f64);
        }
    }

    #[test]
    fn empty_suite_is_rejected() {
        assert!(matches!(
            make_task_suite(0, 1).unwrap_err(),
            EnvError::EmptySuite
        ));
    }

    #[test]
    fn failure_probability_hits_the_cap_in_monte_carlo() {
        // quality 0 on a difficulty-1, fragility-0.5 task sits in the cap
        // region; 1e5 trials converge to the cap within 3 sigma.
        let mut task = make_task_suite(1, 5).unwrap().remove(0);
        task.difficulty = 1.0;
        task.fragility = 0.5;
        let env = EnvParams {
            quality_levels: vec![0.0, 1.0],
            ..EnvParams::default()
        };
        let p = failure_probability(&task, TaskKind::Draft, 0.0, &env);
        assert_eq!(p, FAILURE_CAP);
        let state = draft_state();
        let mut rng = stream_rng(5, "mc", 0, 0);
        let trials = 100_000;
        let mut failures = 0;
        for _ in 0..trials {
            let outcome = execute(&task, &state, 0, &env, &mut rng).unwrap();
            if !outcome.feedback.succeeded {
                failures += 1;
            }
        }
        let freq = failures as f64 / trials as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        assert!((freq - p).abs() < 3.0 * sigma, "freq {freq} vs p {p}");
    }

    #[test]
    fn degenerate_noise_is_deterministic() {
        let mut task = make_task_suite(1, 9).unwrap().remove(0);
        task.difficulty = 0.0;
        task.fragility = 0.0;
        let env = EnvParams {
            noise_sigma: 0.0,
            ..EnvParams::default()
        };
        let state = draft_state();
        let mut scores = Vec::new();
        for i in 0..5 {
            let mut rng = stream_rng(1, "det", i, 0);
            let outcome = execute(&task, &state, 4, &env, &mut rng).unwrap();
            assert!(outcome.feedback.succeeded);
            scores.push(outcome.raw_score);
        }
        assert!(scores.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn identical_streams_give_identical_outcomes() {
        let task = &make_task_suite(3, 21).unwrap()[2];
        let env = EnvParams::default();
        let state = debug_state();
        let run = |seed| {
            let mut rng = stream_rng(seed, "exec", 0, 0);
            (0..20)
                .map(|_| execute(task, &state, 1, &env, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(4), run(4));
    }

    #[test]
    fn improve_state_outscores_draft_with_same_noise_draw() {
        // With failures disabled and zero noise the two closed forms differ
        // exactly by ceiling * improve_gain * prior.
        let mut task = make_task_suite(1, 13).unwrap().remove(0);
        task.difficulty = 0.4;
        task.fragility = 0.0;
        let env = EnvParams {
            noise_sigma: 0.0,
            ..EnvParams::default()
        };
        let action = 2;
        let mut rng_a = stream_rng(8, "pair", 0, 0);
        let mut rng_b = stream_rng(8, "pair", 0, 0);
        let draft = execute(&task, &draft_state(), action, &env, &mut rng_a).unwrap();
        let improve = execute(&task, &improve_state(0.6), action, &env, &mut rng_b).unwrap();
        assert!(improve.raw_score >= draft.raw_score);
        // Strict inequality holds at the performance level when uncapped.
        let q = env.quality_levels[action];
        let perf_draft = base_performance(&task, 0.0, q, &env);
        let perf_improve = base_performance(&task, 0.6, q, &env);
        assert!(perf_improve > perf_draft);
    }

    #[test]
    fn successful_scores_stay_below_the_ceiling() {
        // Composition with the leaderboard construction: rank scores of
        // capped performances never exceed the task ceiling, and failures
        // shape to reward zero.
        let suite = make_task_suite(25, 17).unwrap();
        let env = EnvParams::default();
        let reward_params = RewardParams::default();
        let mut rng = stream_rng(2, "ceil", 0, 0);
        for task in &suite {
            for action in 0..env.actions() {
                for _ in 0..40 {
                    let outcome = execute(task, &draft_state(), action, &env, &mut rng).unwrap();
                    if outcome.feedback.succeeded {
                        assert!(outcome.raw_score >= 0.0);
                        assert!(
                            outcome.raw_score <= task.ceiling,
                            "score {} above ceiling {}",
                            outcome.raw_score,
                            task.ceiling
                        );
                    } else {
                        assert_eq!(outcome.raw_score, -1.0);
                        let r = shaped_reward(outcome.raw_score, 0.0, &reward_params).unwrap();
                        assert_eq!(r, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn debug_rescue_raises_success_rates_for_high_quality() {
        let suite = make_task_suite(20, 23).unwrap();
        let env = EnvParams::default();
        let state = debug_state();
        let mut rng = stream_rng(3, "rescue", 0, 0);
        let trials = 3_000;
        let mut successes = [0u32; 2];
        for task in &suite {
            for (slot, action) in [(0usize, 0usize), (1, 4)] {
                for _ in 0..trials {
                    let outcome = execute(task, &state, action, &env, &mut rng).unwrap();
                    if outcome.feedback.succeeded {
                        successes[slot] += 1;
                    }
                }
            }
        }
        assert!(
            successes[1] > successes[0],
            "high quality {} should beat low quality {}",
            successes[1],
            successes[0]
        );
    }

    #[test]
    fn failed_runs_cost_fewer_ticks_on_average() {
        let mut task = make_task_suite(1, 31).unwrap().remove(0);
        task.difficulty = 0.9;
        task.fragility = 0.4;
        let env = EnvParams::default();
        let state = draft_state();
        let mut rng = stream_rng(6, "ticks", 0, 0);
        let mut fail = (0u64, 0u64);
        let mut ok = (0u64, 0u64);
        for _ in 0..30_000 {
            let outcome = execute(&task, &state, 1, &env, &mut rng).unwrap();
            assert!(tick_cost(&outcome) >= 1);
            if outcome.feedback.succeeded {
                ok = (ok.0 + u64::from(tick_cost(&outcome)), ok.1 + 1);
            } else {
                fail = (fail.0 + u64::from(tick_cost(&outcome)), fail.1 + 1);
            }
        }
        assert!(fail.1 > 100 && ok.1 > 100);
        let mean_fail = fail.0 as f64 / fail.1 as f64;
        let mean_ok = ok.0 as f64 / ok.1 as f64;
        assert!(
            mean_fail < 0.75 * mean_ok,
            "fail mean {mean_fail} vs ok mean {mean_ok}"
        );
    }

    #[test]
    fn best_action_dominates_worst_on_most_tasks() {
        // Brute-force expected shaped reward per action: the top quality
        // level must dominate the bottom one on at least 80% of tasks.
        let suite = make_task_suite(40, 41).unwrap();
        let env = EnvParams::default();
        let reward_params = RewardParams::default();
        let trials = 2_000;
        let mut dominated = 0;
        for (ti, task) in suite.iter().enumerate() {
            let mut expectation = [0.0f64; 2];
            for (slot, action) in [(0usize, 0usize), (1, env.actions() - 1)] {
                let mut rng = stream_rng(55, "learnable", ti as u64, slot as u64);
                let mut total = 0.0;
                for _ in 0..trials {
                    let outcome = execute(task, &draft_state(), action, &env, &mut rng).unwrap();
                    total += shaped_reward(outcome.raw_score, 0.0, &reward_params).unwrap();
                }
                expectation[slot] = total / trials as f64;
            }
            if expectation[1] > expectation[0] {
                dominated += 1;
            }
        }
        assert!(
            dominated >= 32,
            "best action dominates on only {dominated}/40 tasks"
        );
    }

    #[test]
    fn invalid_action_is_rejected() {
        let task = &make_task_suite(1, 1).unwrap()[0];
        let env = EnvParams::default();
        let mut rng = stream_rng(0, "x", 0, 0);
        assert!(matches!(
            execute(task, &draft_state(), 9, &env, &mut rng).unwrap_err(),
            EnvError::InvalidAction {
                action: 9,
                actions: 5
            }
        ));
    }

    #[test]
    fn suite_round_trips_through_the_record_file() {
        let suite = make_task_suite(7, 77).unwrap();
        let mut buf = Vec::new();
        write_suite(&suite, 77, &mut buf).unwrap();
        let (read, seed) = read_suite(io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(seed, 77);
        assert_eq!(read, suite);
    }

    #[test]
    fn malformed_suite_files_are_rejected() {
        let err = read_suite(io::BufReader::new(&b"not json\n"[..])).unwrap_err();
        assert!(matches!(err, EnvError::MalformedSuite(_)));
        let suite = make_task_suite(2, 1).unwrap();
        let mut buf = Vec::new();
        write_suite(&suite, 1, &mut buf).unwrap();
        let truncated = &buf[..buf.len() / 2];
        let last_newline = truncated.iter().rposition(|&b| b == b'\n').unwrap();
        let err = read_suite(io::BufReader::new(&truncated[..=last_newline])).unwrap_err();
        assert!(matches!(err, EnvError::MalformedSuite(_)));
    }
}
