//! Labeling tasks and their lifecycle state machine.
//!
//! A task moves `Created -> Posted(0) -> Assigned(0) -> Answered(0)` and then
//! either finalizes or, under rollover, is re-posted as the next stage.
//! Every change goes through [`LabelTask::apply`], which rejects anything
//! that is not a legal transition and leaves the task untouched on error.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoundingBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "stage", rename_all = "snake_case")]
pub enum TaskState {
    Created,
    Posted(u32),
    Assigned(u32),
    Answered(u32),
    Finalized,
    TimedOut,
}

impl TaskState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, TaskState::Finalized | TaskState::TimedOut)
    }

    pub fn stage(&self) -> Option<u32> {
        match self {
            TaskState::Posted(s) | TaskState::Assigned(s) | TaskState::Answered(s) => Some(*s),
            _ => None,
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskState::Created => write!(f, "Created"),
            TaskState::Posted(s) => write!(f, "Posted({s})"),
            TaskState::Assigned(s) => write!(f, "Assigned({s})"),
            TaskState::Answered(s) => write!(f, "Answered({s})"),
            TaskState::Finalized => write!(f, "Finalized"),
            TaskState::TimedOut => write!(f, "TimedOut"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyKind {
    OneShot,
    Rollover { max_stages: u32, convergence_eps: f64 },
    ParallelOneShot { n_workers: u32, outlier_z: f64 },
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::OneShot => "one-shot",
            StrategyKind::Rollover { .. } => "rollover",
            StrategyKind::ParallelOneShot { .. } => "parallel",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    #[serde(flatten)]
    pub kind: StrategyKind,
    #[serde(default = "default_stage_timeout")]
    pub per_stage_timeout_s: f64,
    #[serde(default = "default_overall_timeout")]
    pub overall_timeout_s: f64,
}

fn default_stage_timeout() -> f64 {
    900.0
}

fn default_overall_timeout() -> f64 {
    7200.0
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            per_stage_timeout_s: default_stage_timeout(),
            overall_timeout_s: default_overall_timeout(),
        }
    }

    pub fn one_shot() -> Self {
        Self::new(StrategyKind::OneShot)
    }

    pub fn rollover(max_stages: u32, convergence_eps: f64) -> Self {
        Self::new(StrategyKind::Rollover {
            max_stages,
            convergence_eps,
        })
    }

    pub fn parallel(n_workers: u32, outlier_z: f64) -> Self {
        Self::new(StrategyKind::ParallelOneShot {
            n_workers,
            outlier_z,
        })
    }

    pub fn with_timeouts(mut self, per_stage_timeout_s: f64, overall_timeout_s: f64) -> Self {
        self.per_stage_timeout_s = per_stage_timeout_s;
        self.overall_timeout_s = overall_timeout_s;
        self
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |m: String| Err(TaskError::InvalidConfig(m));
        match self.kind {
            StrategyKind::OneShot => {}
            StrategyKind::Rollover {
                max_stages,
                convergence_eps,
            } => {
                if max_stages < 2 {
                    return bad(format!("rollover max_stages must be >= 2, got {max_stages}"));
                }
                if !(convergence_eps >= 0.0) {
                    return bad("convergence_eps must be >= 0".into());
                }
            }
            StrategyKind::ParallelOneShot {
                n_workers,
                outlier_z,
            } => {
                if n_workers < 2 {
                    return bad(format!("parallel n_workers must be >= 2, got {n_workers}"));
                }
                if !(outlier_z > 0.0) {
                    return bad("outlier_z must be > 0".into());
                }
            }
        }
        if !(self.per_stage_timeout_s > 0.0 && self.overall_timeout_s > 0.0) {
            return bad("timeouts must be > 0".into());
        }
        Ok(())
    }
}

/// One worker's answer for one stage of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerResponse {
    pub response_id: String,
    pub assignment_id: String,
    pub task_id: String,
    pub stage: u32,
    pub worker_id: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_label: Option<String>,
    pub posted_at: f64,
    pub accepted_at: f64,
    pub submitted_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TaskEvent {
    Posted {
        stage: u32,
        at: f64,
    },
    Accepted {
        assignment_id: String,
        stage: u32,
        at: f64,
    },
    Responded {
        response: WorkerResponse,
    },
    Finalized {
        final_box: BoundingBox,
        at: f64,
        #[serde(default)]
        partial: bool,
    },
    TimedOut {
        at: f64,
    },
}

impl TaskEvent {
    pub fn name(&self) -> &'static str {
        match self {
            TaskEvent::Posted { .. } => "Posted",
            TaskEvent::Accepted { .. } => "Accepted",
            TaskEvent::Responded { .. } => "Responded",
            TaskEvent::Finalized { .. } => "Finalized",
            TaskEvent::TimedOut { .. } => "TimedOut",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TaskError {
    #[error("illegal transition: {event} in state {state}")]
    IllegalTransition { state: TaskState, event: &'static str },
    #[error("duplicate response for assignment {0}")]
    DuplicateResponse(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("invalid strategy config: {0}")]
    InvalidConfig(String),
}

/// A labeling job: one snapshot, one strategy, and the responses gathered so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTask {
    pub task_id: String,
    pub snapshot_ref: String,
    pub image_width: u32,
    pub image_height: u32,
    pub instructions: String,
    pub reward_cents: u32,
    pub strategy: StrategyConfig,
    pub state: TaskState,
    pub responses: Vec<WorkerResponse>,
    pub created_at: f64,
    pub finalized_at: Option<f64>,
    pub final_box: Option<BoundingBox>,
    #[serde(default)]
    pub partial: bool,
    /// Assignments accepted by a worker whose response has not arrived.
    #[serde(default)]
    pub open_assignments: Vec<String>,
}

impl LabelTask {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        task_id: impl Into<String>,
        snapshot_ref: impl Into<String>,
        image_width: u32,
        image_height: u32,
        instructions: impl Into<String>,
        reward_cents: u32,
        strategy: StrategyConfig,
        created_at: f64,
    ) -> Self {
        Self {
            task_id: task_id.into(),
            snapshot_ref: snapshot_ref.into(),
            image_width,
            image_height,
            instructions: instructions.into(),
            reward_cents,
            strategy,
            state: TaskState::Created,
            responses: Vec::new(),
            created_at,
            finalized_at: None,
            final_box: None,
            partial: false,
            open_assignments: Vec::new(),
        }
    }

    fn is_parallel(&self) -> bool {
        matches!(self.strategy.kind, StrategyKind::ParallelOneShot { .. })
    }

    fn stage_responses(&self, stage: u32) -> usize {
        self.responses.iter().filter(|r| r.stage == stage).count()
    }

    fn stage_accepts(&self, stage: u32) -> usize {
        self.stage_responses(stage) + self.open_assignments.len()
    }

    fn worker_capacity(&self) -> usize {
        match self.strategy.kind {
            StrategyKind::ParallelOneShot { n_workers, .. } => n_workers as usize,
            _ => 1,
        }
    }

    /// Applies `event` if it is a legal transition from the current state.
    pub fn apply(&mut self, event: &TaskEvent) -> Result<(), TaskError> {
        let illegal = || TaskError::IllegalTransition {
            state: self.state,
            event: event.name(),
        };
        use TaskState::*;
        match (self.state, event) {
            (Created, TaskEvent::Posted { stage: 0, at }) if *at >= self.created_at => {
                self.state = Posted(0);
            }
            (Answered(s), TaskEvent::Posted { stage, at }) if *stage == s + 1 => {
                let StrategyKind::Rollover { max_stages, .. } = self.strategy.kind else {
                    return Err(illegal());
                };
                if *stage >= max_stages || *at < self.created_at {
                    return Err(illegal());
                }
                self.state = Posted(*stage);
            }
            (Posted(s) | Assigned(s) | Answered(s), TaskEvent::Accepted { assignment_id, stage, .. })
                if *stage == s =>
            {
                let first = matches!(self.state, Posted(_));
                if !first && !self.is_parallel() {
                    return Err(illegal());
                }
                if self.open_assignments.contains(assignment_id)
                    || self.responses.iter().any(|r| &r.assignment_id == assignment_id)
                {
                    return Err(TaskError::DuplicateResponse(assignment_id.clone()));
                }
                if self.stage_accepts(s) >= self.worker_capacity() {
                    return Err(illegal());
                }
                self.open_assignments.push(assignment_id.clone());
                if first {
                    self.state = Assigned(s);
                }
            }
            (Assigned(s) | Answered(s), TaskEvent::Responded { response }) if response.stage == s => {
                if matches!(self.state, Answered(_)) && !self.is_parallel() {
                    return Err(illegal());
                }
                if self.responses.iter().any(|r| r.assignment_id == response.assignment_id) {
                    return Err(TaskError::DuplicateResponse(response.assignment_id.clone()));
                }
                let Some(pos) = self
                    .open_assignments
                    .iter()
                    .position(|a| a == &response.assignment_id)
                else {
                    return Err(illegal());
                };
                self.check_response(response)?;
                self.open_assignments.remove(pos);
                self.responses.push(response.clone());
                self.state = Answered(s);
            }
            (
                Answered(_),
                TaskEvent::Finalized {
                    final_box,
                    at,
                    partial,
                },
            ) => {
                self.finalize(final_box, *at, *partial)?;
            }
            (
                Posted(s) | Assigned(s),
                TaskEvent::Finalized {
                    final_box,
                    at,
                    partial: true,
                },
            ) if s >= 1 && matches!(self.strategy.kind, StrategyKind::Rollover { .. }) => {
                self.finalize(final_box, *at, true)?;
            }
            (state, TaskEvent::TimedOut { at }) if !state.is_terminal() && *at >= self.created_at => {
                self.state = TimedOut;
                self.finalized_at = Some(*at);
                self.open_assignments.clear();
            }
            _ => return Err(illegal()),
        }
        Ok(())
    }

    fn finalize(&mut self, final_box: &BoundingBox, at: f64, partial: bool) -> Result<(), TaskError> {
        if !final_box.fits_within(f64::from(self.image_width), f64::from(self.image_height)) {
            return Err(TaskError::InvalidResponse("final box outside image".into()));
        }
        if at < self.created_at {
            return Err(TaskError::InvalidResponse("finalized before creation".into()));
        }
        self.state = TaskState::Finalized;
        self.final_box = Some(*final_box);
        self.finalized_at = Some(at);
        self.partial = partial;
        self.open_assignments.clear();
        Ok(())
    }

    fn check_response(&self, r: &WorkerResponse) -> Result<(), TaskError> {
        if r.task_id != self.task_id {
            return Err(TaskError::InvalidResponse(format!(
                "response for task {} applied to {}",
                r.task_id, self.task_id
            )));
        }
        if !(r.posted_at <= r.accepted_at && r.accepted_at <= r.submitted_at) {
            return Err(TaskError::InvalidResponse("timestamps out of order".into()));
        }
        if !r
            .bbox
            .fits_within(f64::from(self.image_width), f64::from(self.image_height))
        {
            return Err(TaskError::InvalidResponse("box outside image".into()));
        }
        Ok(())
    }

    /// Checks the structural invariants every reachable task satisfies.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.final_box.is_some() != (self.state == TaskState::Finalized) {
            return Err("final_box present iff Finalized".into());
        }
        if let Some(f) = self.finalized_at {
            if f < self.created_at {
                return Err("finalized_at before created_at".into());
            }
        }
        let mut prev = 0;
        for (i, r) in self.responses.iter().enumerate() {
            let ok = if i == 0 { r.stage == 0 } else { r.stage == prev || r.stage == prev + 1 };
            if !ok {
                return Err(format!("responses not contiguous at stage {}", r.stage));
            }
            prev = r.stage;
        }
        let mut ids: Vec<&str> = self.responses.iter().map(|r| r.assignment_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err("duplicate response for one assignment".into());
        }
        Ok(())
    }
}

/// Returns `task` with `event` applied.
pub fn advance(task: &LabelTask, event: &TaskEvent) -> Result<LabelTask, TaskError> {
    let mut next = task.clone();
    next.apply(event)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(cfg: StrategyConfig) -> LabelTask {
        LabelTask::new("t1", "snap", 640, 480, "box the mug", 25, cfg, 0.0)
    }

    fn response(a: &str, stage: u32, t: f64) -> WorkerResponse {
        WorkerResponse {
            response_id: format!("r-{a}"),
            assignment_id: a.into(),
            task_id: "t1".into(),
            stage,
            worker_id: "w".into(),
            bbox: BoundingBox::new(10.0, 10.0, 50.0, 50.0).unwrap(),
            text_label: None,
            posted_at: t,
            accepted_at: t + 1.0,
            submitted_at: t + 2.0,
        }
    }

    fn accepted(a: &str, stage: u32) -> TaskEvent {
        TaskEvent::Accepted {
            assignment_id: a.into(),
            stage,
            at: 1.0,
        }
    }

    #[test]
    fn created_to_posted() {
        let t = advance(&task(StrategyConfig::one_shot()), &TaskEvent::Posted { stage: 0, at: 0.0 })
            .unwrap();
        assert_eq!(t.state, TaskState::Posted(0));
    }

    #[test]
    fn response_before_accept_is_illegal() {
        let t = advance(&task(StrategyConfig::one_shot()), &TaskEvent::Posted { stage: 0, at: 0.0 })
            .unwrap();
        let err = advance(
            &t,
            &TaskEvent::Responded {
                response: response("a0", 0, 0.0),
            },
        )
        .unwrap_err();
        assert_eq!(
            err,
            TaskError::IllegalTransition {
                state: TaskState::Posted(0),
                event: "Responded"
            }
        );
    }

    #[test]
    fn one_shot_trace_has_four_transitions() {
        let events = [
            TaskEvent::Posted { stage: 0, at: 0.0 },
            accepted("a0", 0),
            TaskEvent::Responded {
                response: response("a0", 0, 0.0),
            },
            TaskEvent::Finalized {
                final_box: BoundingBox::new(10.0, 10.0, 50.0, 50.0).unwrap(),
                at: 2.0,
                partial: false,
            },
        ];
        let mut t = task(StrategyConfig::one_shot());
        let mut states = vec![t.state];
        for e in &events {
            t = advance(&t, e).unwrap();
            states.push(t.state);
        }
        assert_eq!(
            states,
            [
                TaskState::Created,
                TaskState::Posted(0),
                TaskState::Assigned(0),
                TaskState::Answered(0),
                TaskState::Finalized
            ]
        );
        assert_eq!(states.len() - 1, 4);
        t.check_invariants().unwrap();
        // terminal: nothing else applies
        assert!(advance(&t, &TaskEvent::TimedOut { at: 5.0 }).is_err());
    }

    #[test]
    fn rollover_reposts_until_max() {
        let mut t = task(StrategyConfig::rollover(2, 0.0));
        t.apply(&TaskEvent::Posted { stage: 0, at: 0.0 }).unwrap();
        t.apply(&accepted("a0", 0)).unwrap();
        t.apply(&TaskEvent::Responded {
            response: response("a0", 0, 0.0),
        })
        .unwrap();
        t.apply(&TaskEvent::Posted { stage: 1, at: 2.0 }).unwrap();
        t.apply(&accepted("a1", 1)).unwrap();
        t.apply(&TaskEvent::Responded {
            response: response("a1", 1, 2.0),
        })
        .unwrap();
        assert!(t.apply(&TaskEvent::Posted { stage: 2, at: 4.0 }).is_err());
        t.check_invariants().unwrap();
    }

    #[test]
    fn one_shot_cannot_repost() {
        let mut t = task(StrategyConfig::one_shot());
        t.apply(&TaskEvent::Posted { stage: 0, at: 0.0 }).unwrap();
        t.apply(&accepted("a0", 0)).unwrap();
        t.apply(&TaskEvent::Responded {
            response: response("a0", 0, 0.0),
        })
        .unwrap();
        assert!(t.apply(&TaskEvent::Posted { stage: 1, at: 3.0 }).is_err());
        assert!(t.apply(&accepted("a1", 0)).is_err());
    }

    #[test]
    fn duplicate_response_rejected() {
        let mut t = task(StrategyConfig::parallel(3, 2.0));
        t.apply(&TaskEvent::Posted { stage: 0, at: 0.0 }).unwrap();
        t.apply(&accepted("a0", 0)).unwrap();
        t.apply(&TaskEvent::Responded {
            response: response("a0", 0, 0.0),
        })
        .unwrap();
        let dup = t.apply(&TaskEvent::Responded {
            response: response("a0", 0, 0.0),
        });
        assert_eq!(dup, Err(TaskError::DuplicateResponse("a0".into())));
        assert_eq!(t.apply(&accepted("a0", 0)), Err(TaskError::DuplicateResponse("a0".into())));
    }

    #[test]
    fn parallel_capacity_is_enforced() {
        let mut t = task(StrategyConfig::parallel(2, 2.0));
        t.apply(&TaskEvent::Posted { stage: 0, at: 0.0 }).unwrap();
        t.apply(&accepted("a0", 0)).unwrap();
        t.apply(&accepted("a1", 0)).unwrap();
        assert!(t.apply(&accepted("a2", 0)).is_err());
    }

    #[test]
    fn partial_rollover_finalize() {
        let mut t = task(StrategyConfig::rollover(4, 0.0));
        t.apply(&TaskEvent::Posted { stage: 0, at: 0.0 }).unwrap();
        let fb = BoundingBox::new(10.0, 10.0, 50.0, 50.0).unwrap();
        // stage 0 cannot be finalized partially
        assert!(t
            .apply(&TaskEvent::Finalized {
                final_box: fb,
                at: 1.0,
                partial: true
            })
            .is_err());
        t.apply(&accepted("a0", 0)).unwrap();
        t.apply(&TaskEvent::Responded {
            response: response("a0", 0, 0.0),
        })
        .unwrap();
        t.apply(&TaskEvent::Posted { stage: 1, at: 2.0 }).unwrap();
        t.apply(&TaskEvent::Finalized {
            final_box: fb,
            at: 900.0,
            partial: true,
        })
        .unwrap();
        assert_eq!(t.state, TaskState::Finalized);
        assert!(t.partial);
    }

    #[test]
    fn strategy_config_json_shape() {
        let cfg = StrategyConfig::rollover(5, 0.25);
        let v = serde_json::to_value(cfg).unwrap();
        assert_eq!(v["kind"], "rollover");
        assert_eq!(v["max_stages"], 5);
        let back: StrategyConfig =
            serde_json::from_str(r#"{"kind":"parallel_one_shot","n_workers":9,"outlier_z":2.0}"#)
                .unwrap();
        assert_eq!(back, StrategyConfig::parallel(9, 2.0));
        assert!(StrategyConfig::rollover(1, 0.0).validate().is_err());
        assert!(StrategyConfig::parallel(1, 2.0).validate().is_err());
        assert!(StrategyConfig::one_shot().with_timeouts(0.0, 1.0).validate().is_err());
    }

    #[test]
    fn state_json_shape() {
        assert_eq!(
            serde_json::to_value(TaskState::Posted(2)).unwrap(),
            serde_json::json!({"state": "posted", "stage": 2})
        );
        assert_eq!(
            serde_json::to_value(TaskState::Finalized).unwrap(),
            serde_json::json!({"state": "finalized"})
        );
    }
}
