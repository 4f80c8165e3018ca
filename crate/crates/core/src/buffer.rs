//! Task states, the transition operator, and the append-only evolving buffer.
//!
//! A context state bundles everything needed to restart optimization from an
//! intermediate point: the task instance, the latest code snapshot (an opaque
//! solution id), and the full execution history. Executing an action against
//! the environment spawns a derivative state via [`transition`], which is
//! appended to the [`EvolvingBuffer`]; states are never removed.
//!
//! Task kinds partition the buffer by operational phase:
//!
//! - `Draft`   — no code yet (empty history),
//! - `Debug`   — the most recent execution failed,
//! - `Improve` — the most recent execution succeeded but is improvable.
//!
//! The buffer supports concurrent appends from rollout workers and read-only
//! snapshots for the sampler; per-state metadata writes (potential, visit
//! history) are serialized per state. A snapshot observes a consistent prefix
//! of appends: states appended afterwards are invisible to it.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{self, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of most recent visit timestamps retained per state.
pub const VISIT_WINDOW: usize = 20;

// ---------------------------------------------------------------------------
// Identifiers
// ---------------------------------------------------------------------------

macro_rules! id_newtype {
    ($(#[$doc:meta])* $name:ident, $inner:ty) => {
        $(#[$doc])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_newtype!(
    /// Opaque identifier of a context state in the buffer.
    StateId,
    u64
);
id_newtype!(
    /// Opaque identifier of a task instance.
    InstanceId,
    u64
);
id_newtype!(
    /// Opaque identifier of one emitted solution (a code snapshot handle).
    SolutionId,
    u64
);
id_newtype!(
    /// Identifier of the scoring rule used by a task.
    MetricId,
    u32
);
id_newtype!(
    /// Identifier of the synthetic leaderboard attached to a task.
    LeaderboardId,
    u32
);

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Operational phase of a context state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Draft,
    Debug,
    Improve,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Draft, TaskKind::Debug, TaskKind::Improve];

    pub fn index(self) -> usize {
        match self {
            TaskKind::Draft => 0,
            TaskKind::Debug => 1,
            TaskKind::Improve => 2,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::Draft => "draft",
            TaskKind::Debug => "debug",
            TaskKind::Improve => "improve",
        };
        f.write_str(s)
    }
}

/// Coarse classification of an execution failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    None,
    RuntimeError,
    InvalidSubmission,
}

/// Synthetic execution feedback: success flag plus a traceback surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecFeedback {
    pub succeeded: bool,
    pub error_class: ErrorClass,
    /// Small integer standing in for a traceback signature.
    pub detail_code: u8,
}

impl ExecFeedback {
    pub fn success() -> Self {
        Self {
            succeeded: true,
            error_class: ErrorClass::None,
            detail_code: 0,
        }
    }

    pub fn failure(error_class: ErrorClass, detail_code: u8) -> Self {
        debug_assert!(error_class != ErrorClass::None);
        Self {
            succeeded: false,
            error_class,
            detail_code,
        }
    }

    pub fn validate(&self) -> Result<(), BufferError> {
        if self.succeeded != (self.error_class == ErrorClass::None) {
            return Err(BufferError::InconsistentFeedback);
        }
        Ok(())
    }
}

/// One past execution: the solution tried, its feedback, and its score.
///
/// `score` is the rank score of the submission, or exactly `-1.0` when the
/// execution failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub solution_id: SolutionId,
    pub feedback: ExecFeedback,
    pub score: f64,
}

impl HistoryEntry {
    pub fn new(
        solution_id: SolutionId,
        feedback: ExecFeedback,
        score: f64,
    ) -> Result<Self, BufferError> {
        feedback.validate()?;
        let failed = score == -1.0;
        if failed == feedback.succeeded || (!failed && !(0.0..=1.0).contains(&score)) {
            return Err(BufferError::ScoreFeedbackMismatch {
                score,
                succeeded: feedback.succeeded,
            });
        }
        Ok(Self {
            solution_id,
            feedback,
            score,
        })
    }
}

/// A task instance: description surrogate, latent difficulty, and the
/// identifiers of its scoring rule and leaderboard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: InstanceId,
    /// Fixed-length real vector standing in for the natural-language
    /// description.
    pub description_features: Vec<f64>,
    /// Latent difficulty in `[0, 1]`; owned by the execution environment.
    pub difficulty: f64,
    pub metric_id: MetricId,
    pub leaderboard_id: LeaderboardId,
}

impl TaskInstance {
    pub fn validate(&self) -> Result<(), BufferError> {
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(BufferError::InvalidState(format!(
                "instance {} difficulty {} outside [0, 1]",
                self.id, self.difficulty
            )));
        }
        Ok(())
    }
}

/// One step-wise task: a restartable snapshot of an optimization trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextState {
    pub state_id: StateId,
    pub instance_id: InstanceId,
    /// Latest code snapshot; `None` means no code has been produced yet.
    pub code: Option<SolutionId>,
    pub history: Vec<HistoryEntry>,
    pub kind: TaskKind,
    /// Learnability potential; overwritten after each rollout of this state.
    pub potential: f64,
    /// Outer-iteration indices at which this state was sampled, oldest first,
    /// capped at [`VISIT_WINDOW`].
    pub visit_times: Vec<u64>,
}

impl ContextState {
    /// Creates the seed `Draft` state for a task instance.
    pub fn seed(state_id: StateId, instance_id: InstanceId, p_init: f64) -> Self {
        Self {
            state_id,
            instance_id,
            code: None,
            history: Vec::new(),
            kind: TaskKind::Draft,
            potential: p_init,
            visit_times: Vec::new(),
        }
    }

    /// Depth of the state in its trajectory; equals the history length.
    pub fn depth(&self) -> usize {
        self.history.len()
    }

    pub fn last_feedback(&self) -> Option<&ExecFeedback> {
        self.history.last().map(|e| &e.feedback)
    }

    /// Checks every structural invariant of the state.
    pub fn validate(&self) -> Result<(), BufferError> {
        for entry in &self.history {
            entry.feedback.validate()?;
            let failed = entry.score == -1.0;
            if failed == entry.feedback.succeeded
                || (!failed && !(0.0..=1.0).contains(&entry.score))
            {
                return Err(BufferError::ScoreFeedbackMismatch {
                    score: entry.score,
                    succeeded: entry.feedback.succeeded,
                });
            }
        }
        if self.code.is_some() != !self.history.is_empty() {
            return Err(BufferError::InvalidState(format!(
                "state {}: code presence must match non-empty history",
                self.state_id
            )));
        }
        let expected = classify_kind(self.code.is_some(), self.last_feedback())?;
        if expected != self.kind {
            return Err(BufferError::InvalidState(format!(
                "state {}: kind {} does not match history (expected {})",
                self.state_id, self.kind, expected
            )));
        }
        if !self.visit_times.windows(2).all(|w| w[0] < w[1]) {
            return Err(BufferError::InvalidState(format!(
                "state {}: visit times not strictly increasing",
                self.state_id
            )));
        }
        if !(self.potential >= 0.0 && self.potential.is_finite()) {
            return Err(BufferError::InvalidState(format!(
                "state {}: potential {} must be finite and non-negative",
                self.state_id, self.potential
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Kind classification and the transition operator
// ---------------------------------------------------------------------------

/// Assigns the operational phase implied by code presence and the latest
/// feedback.
///
/// Every non-`Draft` state derives from an execution, so code without
/// feedback (and feedback without code) is a contract violation.
pub fn classify_kind(
    code_present: bool,
    last_feedback: Option<&ExecFeedback>,
) -> Result<TaskKind, BufferError> {
    match (code_present, last_feedback) {
        (false, None) => Ok(TaskKind::Draft),
        (false, Some(_)) => Err(BufferError::FeedbackWithoutCode),
        (true, None) => Err(BufferError::CodeWithoutFeedback),
        (true, Some(feedback)) => Ok(if feedback.succeeded {
            TaskKind::Improve
        } else {
            TaskKind::Debug
        }),
    }
}

/// Spawns the derivative state produced by executing `solution_id` from
/// `parent`.
///
/// The child extends the parent's history by exactly one entry, adopts the
/// executed solution as its code snapshot, starts at potential `p_init` with
/// an empty visit history, and stays on the same task instance.
pub fn transition(
    parent: &ContextState,
    child_id: StateId,
    solution_id: SolutionId,
    feedback: ExecFeedback,
    score: f64,
    p_init: f64,
) -> Result<ContextState, BufferError> {
    let entry = HistoryEntry::new(solution_id, feedback, score)?;
    let kind = classify_kind(true, Some(&entry.feedback))?;
    let mut history = Vec::with_capacity(parent.history.len() + 1);
    history.extend_from_slice(&parent.history);
    history.push(entry);
    Ok(ContextState {
        state_id: child_id,
        instance_id: parent.instance_id,
        code: Some(solution_id),
        history,
        kind,
        potential: p_init,
        visit_times: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq)]
pub enum BufferError {
    #[error("no seed instances provided")]
    EmptySeed,
    #[error("duplicate instance id {0}")]
    DuplicateInstance(InstanceId),
    #[error("state id {0} already present in the buffer")]
    IdCollision(StateId),
    #[error("unknown state id {0}")]
    UnknownState(StateId),
    #[error("state has code but no execution feedback")]
    CodeWithoutFeedback,
    #[error("execution feedback present without code")]
    FeedbackWithoutCode,
    #[error("feedback success flag disagrees with its error class")]
    InconsistentFeedback,
    #[error("score {score} inconsistent with feedback (succeeded = {succeeded})")]
    ScoreFeedbackMismatch { score: f64, succeeded: bool },
    #[error("visit at t = {t} is not after iteration {iteration} and last visit {last:?}")]
    VisitOutOfOrder {
        t: u64,
        iteration: u64,
        last: Option<u64>,
    },
    #[error("iteration may not move backwards ({from} -> {to})")]
    IterationRegression { from: u64, to: u64 },
    #[error("invalid state: {0}")]
    InvalidState(String),
}

// ---------------------------------------------------------------------------
// The evolving buffer
// ---------------------------------------------------------------------------

/// Lightweight per-state view used by the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct StateView {
    pub state_id: StateId,
    pub kind: TaskKind,
    pub depth: usize,
    pub potential: f64,
    pub visit_times: Vec<u64>,
    /// Reward standard deviation of the most recent rollout group, if any.
    /// Diagnostic only; states with positive dispersion are counted as the
    /// current learning frontier.
    pub last_group_std: Option<f64>,
    /// Append position; used as the final sort tie-breaker.
    pub insertion: usize,
}

/// A consistent read-only view of the buffer at one instant.
#[derive(Debug, Clone)]
pub struct BufferSnapshot {
    pub iteration: u64,
    pub views: Vec<StateView>,
}

impl BufferSnapshot {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

#[derive(Debug)]
struct SlotData {
    state: ContextState,
    last_group_std: Option<f64>,
}

#[derive(Debug)]
struct Inner {
    slots: Vec<Arc<Mutex<SlotData>>>,
    index: HashMap<StateId, usize>,
    kind_counts: [u64; 3],
}

/// Append-only pool of context states plus per-state metadata.
///
/// Sizes are monotone non-decreasing; nothing is ever evicted.
#[derive(Debug)]
pub struct EvolvingBuffer {
    inner: RwLock<Inner>,
    iteration: AtomicU64,
    next_state_id: AtomicU64,
}

impl EvolvingBuffer {
    /// Creates a buffer seeded with one `Draft` state per instance.
    pub fn new(seed_instances: &[TaskInstance], p_init: f64) -> Result<Self, BufferError> {
        if seed_instances.is_empty() {
            return Err(BufferError::EmptySeed);
        }
        let mut seen = HashSet::with_capacity(seed_instances.len());
        let mut slots = Vec::with_capacity(seed_instances.len());
        let mut index = HashMap::with_capacity(seed_instances.len());
        for (pos, instance) in seed_instances.iter().enumerate() {
            instance.validate()?;
            if !seen.insert(instance.id) {
                return Err(BufferError::DuplicateInstance(instance.id));
            }
            let state = ContextState::seed(StateId(pos as u64), instance.id, p_init);
            index.insert(state.state_id, pos);
            slots.push(Arc::new(Mutex::new(SlotData {
                state,
                last_group_std: None,
            })));
        }
        Ok(Self {
            inner: RwLock::new(Inner {
                slots,
                index,
                kind_counts: [seed_instances.len() as u64, 0, 0],
            }),
            iteration: AtomicU64::new(0),
            next_state_id: AtomicU64::new(seed_instances.len() as u64),
        })
    }

    /// Current outer iteration `t`.
    pub fn iteration(&self) -> u64 {
        self.iteration.load(Ordering::SeqCst)
    }

    /// Advances the outer iteration; it may never move backwards.
    pub fn set_iteration(&self, t: u64) -> Result<(), BufferError> {
        let current = self.iteration.load(Ordering::SeqCst);
        if t < current {
            return Err(BufferError::IterationRegression {
                from: current,
                to: t,
            });
        }
        self.iteration.store(t, Ordering::SeqCst);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inner.read().unwrap().slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-kind state counts, indexed by [`TaskKind::index`].
    pub fn kind_counts(&self) -> [u64; 3] {
        self.inner.read().unwrap().kind_counts
    }

    /// Allocates a fresh state id. Ids are issued sequentially.
    pub fn allocate_state_id(&self) -> StateId {
        StateId(self.next_state_id.fetch_add(1, Ordering::SeqCst))
    }

    /// Appends a freshly spawned state. The buffer grows by exactly one; the
    /// iteration counter is untouched.
    pub fn append(&self, child: ContextState) -> Result<StateId, BufferError> {
        child.validate()?;
        let id = child.state_id;
        let mut inner = self.inner.write().unwrap();
        if inner.index.contains_key(&id) {
            return Err(BufferError::IdCollision(id));
        }
        let pos = inner.slots.len();
        inner.kind_counts[child.kind.index()] += 1;
        inner.index.insert(id, pos);
        inner.slots.push(Arc::new(Mutex::new(SlotData {
            state: child,
            last_group_std: None,
        })));
        // Keep the id allocator ahead of externally constructed ids.
        self.next_state_id.fetch_max(id.0 + 1, Ordering::SeqCst);
        Ok(id)
    }

    fn slot(&self, id: StateId) -> Result<Arc<Mutex<SlotData>>, BufferError> {
        let inner = self.inner.read().unwrap();
        let pos = *inner.index.get(&id).ok_or(BufferError::UnknownState(id))?;
        Ok(Arc::clone(&inner.slots[pos]))
    }

    /// Returns a clone of the state, if present.
    pub fn get(&self, id: StateId) -> Option<ContextState> {
        self.slot(id).ok().map(|s| s.lock().unwrap().state.clone())
    }

    /// Records that `id` was sampled at iteration `t`. Keeps at most
    /// [`VISIT_WINDOW`] timestamps, dropping the oldest.
    pub fn record_visit(&self, id: StateId, t: u64) -> Result<(), BufferError> {
        let iteration = self.iteration();
        let slot = self.slot(id)?;
        let mut data = slot.lock().unwrap();
        let last = data.state.visit_times.last().copied();
        if t < iteration || last.is_some_and(|l| t <= l) {
            return Err(BufferError::VisitOutOfOrder { t, iteration, last });
        }
        data.state.visit_times.push(t);
        if data.state.visit_times.len() > VISIT_WINDOW {
            data.state.visit_times.remove(0);
        }
        Ok(())
    }

    /// Overwrites the state's potential and records the rollout group's
    /// reward dispersion. Returns the new potential.
    pub fn record_rollout_outcome(
        &self,
        id: StateId,
        potential: f64,
        group_std: f64,
    ) -> Result<f64, BufferError> {
        let slot = self.slot(id)?;
        let mut data = slot.lock().unwrap();
        data.state.potential = potential;
        data.last_group_std = Some(group_std);
        Ok(potential)
    }

    /// Takes a consistent snapshot of the sampler-relevant fields.
    pub fn sampler_snapshot(&self) -> BufferSnapshot {
        let (slots, iteration) = {
            let inner = self.inner.read().unwrap();
            (inner.slots.clone(), self.iteration())
        };
        let views = slots
            .iter()
            .enumerate()
            .map(|(insertion, slot)| {
                let data = slot.lock().unwrap();
                StateView {
                    state_id: data.state.state_id,
                    kind: data.state.kind,
                    depth: data.state.depth(),
                    potential: data.state.potential,
                    visit_times: data.state.visit_times.clone(),
                    last_group_std: data.last_group_std,
                    insertion,
                }
            })
            .collect();
        BufferSnapshot { iteration, views }
    }

    /// Clones out every state in insertion order.
    pub fn export_states(&self) -> Vec<ContextState> {
        let slots = self.inner.read().unwrap().slots.clone();
        slots
            .iter()
            .map(|slot| slot.lock().unwrap().state.clone())
            .collect()
    }

    /// Writes the line-delimited snapshot: a header record followed by one
    /// JSON record per state, in insertion order.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(
            w,
            "{}",
            serde_json::to_string(&SnapshotHeader {
                format: "buffer-snapshot",
                version: SNAPSHOT_FORMAT_VERSION,
                states: self.len(),
                iteration: self.iteration(),
            })?
        )?;
        for state in self.export_states() {
            let row = SnapshotRow {
                state_id: state.state_id,
                instance_id: state.instance_id,
                kind: state.kind,
                depth: state.depth(),
                potential: state.potential,
                visit_times: &state.visit_times,
                history: &state.history,
            };
            writeln!(w, "{}", serde_json::to_string(&row)?)?;
        }
        Ok(())
    }
}

/// Version tag written into snapshot headers; bump on schema changes.
pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
struct SnapshotHeader {
    format: &'static str,
    version: u32,
    states: usize,
    iteration: u64,
}

#[derive(Serialize)]
struct SnapshotRow<'a> {
    state_id: StateId,
    instance_id: InstanceId,
    kind: TaskKind,
    depth: usize,
    potential: f64,
    visit_times: &'a [u64],
    history: &'a [HistoryEntry],
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
