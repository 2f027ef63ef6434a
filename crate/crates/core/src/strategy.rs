//! Label acquisition strategies.
//!
//! Each strategy drives one [`LabelTask`] from `Created` to a terminal state
//! through a [`CrowdBackend`], applying every transition via the task state
//! machine and reporting it to a [`TaskObserver`] (the service persists them,
//! the harness ignores them). Strategies never move time themselves; they
//! only read the backend's clock.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Assignment, AssignmentHandle, AwaitResult, BackendError, CrowdBackend};
use crate::geometry::{box_mse, clamp_box, filter_outliers, mean_box, BoundingBox, GeometryError};
use crate::task::{LabelTask, StrategyKind, TaskError, TaskEvent, TaskState, WorkerResponse};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StrategyError {
    #[error("stage {stage} timed out")]
    StageTimeout { stage: u32 },
    #[error("only {got} responses arrived before the timeout")]
    InsufficientResponses { got: usize },
    #[error("task must be in Created to start, found {0}")]
    NotCreated(TaskState),
    #[error("task strategy is {found}, expected {expected}")]
    WrongStrategy {
        expected: &'static str,
        found: &'static str,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Result of a finalized task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub task_id: String,
    pub final_box: BoundingBox,
    pub total_latency_s: f64,
    pub stage_count: u32,
    pub per_stage_latencies: Vec<f64>,
    /// Rollover stopped early on a timeout and kept its best box so far.
    pub partial: bool,
    /// Reward paid: one reward per response collected.
    pub cost_cents: u32,
}

pub trait TaskObserver {
    fn observe(&mut self, task: &LabelTask, event: &TaskEvent);
}

impl<F: FnMut(&LabelTask, &TaskEvent)> TaskObserver for F {
    fn observe(&mut self, task: &LabelTask, event: &TaskEvent) {
        self(task, event)
    }
}

/// Observer that discards events.
pub struct Discard;

impl TaskObserver for Discard {
    fn observe(&mut self, _: &LabelTask, _: &TaskEvent) {}
}

/// Runs whichever strategy the task is configured with.
pub fn run_strategy(
    task: &mut LabelTask,
    backend: &mut dyn CrowdBackend,
    observer: &mut dyn TaskObserver,
) -> Result<Outcome, StrategyError> {
    match task.strategy.kind {
        StrategyKind::OneShot => run_one_shot(task, backend, observer),
        StrategyKind::Rollover { .. } => run_rollover(task, backend, observer),
        StrategyKind::ParallelOneShot { .. } => run_parallel(task, backend, observer),
    }
}

struct Driver<'a> {
    task: &'a mut LabelTask,
    backend: &'a mut dyn CrowdBackend,
    observer: &'a mut dyn TaskObserver,
}

impl Driver<'_> {
    fn start(
        task: &LabelTask,
        expected: &'static str,
        matches: bool,
    ) -> Result<(), StrategyError> {
        task.strategy.validate()?;
        if task.state != TaskState::Created {
            return Err(StrategyError::NotCreated(task.state));
        }
        if !matches {
            return Err(StrategyError::WrongStrategy {
                expected,
                found: task.strategy.kind.name(),
            });
        }
        Ok(())
    }

    fn apply(&mut self, event: TaskEvent) -> Result<(), StrategyError> {
        self.task.apply(&event)?;
        self.observer.observe(self.task, &event);
        Ok(())
    }

    /// Time left for the current stage under both the stage and overall limits.
    fn stage_timeout(&self) -> f64 {
        let s = &self.task.strategy;
        let overall_left = self.task.created_at + s.overall_timeout_s - self.backend.now();
        s.per_stage_timeout_s.min(overall_left).max(0.0)
    }

    fn assignment(&self, stage: u32, slot: u32, prior_box: Option<BoundingBox>) -> Assignment {
        let t = &self.task;
        let now = self.backend.now();
        Assignment {
            assignment_id: format!("{}-s{stage}-w{slot}", t.task_id),
            task_id: t.task_id.clone(),
            stage,
            snapshot_ref: t.snapshot_ref.clone(),
            image_width: t.image_width,
            image_height: t.image_height,
            instructions: t.instructions.clone(),
            prior_box,
            reward_cents: t.reward_cents,
            posted_at: now,
            expires_at: now + self.stage_timeout().max(f64::MIN_POSITIVE),
        }
    }

    fn record(&mut self, r: &WorkerResponse) -> Result<(), StrategyError> {
        self.apply(TaskEvent::Accepted {
            assignment_id: r.assignment_id.clone(),
            stage: r.stage,
            at: r.accepted_at,
        })?;
        self.apply(TaskEvent::Responded { response: r.clone() })
    }

    fn record_unanswered_claim(
        &mut self,
        assignment_id: &str,
        stage: u32,
        accepted_at: Option<f64>,
    ) -> Result<(), StrategyError> {
        match accepted_at {
            Some(at) => self.apply(TaskEvent::Accepted {
                assignment_id: assignment_id.to_owned(),
                stage,
                at,
            }),
            None => Ok(()),
        }
    }

    fn outcome(&self) -> Outcome {
        let t = &*self.task;
        let stage_count = t.responses.iter().map(|r| r.stage + 1).max().unwrap_or(0);
        let per_stage_latencies = (0..stage_count)
            .map(|s| {
                let rs = t.responses.iter().filter(|r| r.stage == s);
                let posted = rs.clone().map(|r| r.posted_at).fold(f64::INFINITY, f64::min);
                let done = rs.map(|r| r.submitted_at).fold(f64::NEG_INFINITY, f64::max);
                done - posted
            })
            .collect();
        Outcome {
            task_id: t.task_id.clone(),
            final_box: t.final_box.expect("outcome built only for finalized tasks"),
            total_latency_s: t.finalized_at.unwrap_or(t.created_at) - t.created_at,
            stage_count,
            per_stage_latencies,
            partial: t.partial,
            cost_cents: t.reward_cents * t.responses.len() as u32,
        }
    }
}

/// Posts once and finalizes with the first worker's box.
pub fn run_one_shot(
    task: &mut LabelTask,
    backend: &mut dyn CrowdBackend,
    observer: &mut dyn TaskObserver,
) -> Result<Outcome, StrategyError> {
    Driver::start(task, "one-shot", matches!(task.strategy.kind, StrategyKind::OneShot))?;
    let mut d = Driver {
        task,
        backend,
        observer,
    };
    let a = d.assignment(0, 0, None);
    let handle = d.backend.post(&a)?;
    d.apply(TaskEvent::Posted {
        stage: 0,
        at: a.posted_at,
    })?;
    let timeout = d.stage_timeout();
    match d.backend.await_response(&handle, timeout)? {
        AwaitResult::Response(r) => {
            d.record(&r)?;
            d.apply(TaskEvent::Finalized {
                final_box: r.bbox,
                at: r.submitted_at,
                partial: false,
            })?;
            Ok(d.outcome())
        }
        AwaitResult::Timeout { at, accepted_at } => {
            d.record_unanswered_claim(&a.assignment_id, 0, accepted_at)?;
            d.apply(TaskEvent::TimedOut { at })?;
            Err(StrategyError::StageTimeout { stage: 0 })
        }
    }
}

/// Hands the label from worker to worker, each correcting the last, until two
/// consecutive boxes agree within `convergence_eps` or the chain is exhausted.
pub fn run_rollover(
    task: &mut LabelTask,
    backend: &mut dyn CrowdBackend,
    observer: &mut dyn TaskObserver,
) -> Result<Outcome, StrategyError> {
    let StrategyKind::Rollover {
        max_stages,
        convergence_eps,
    } = task.strategy.kind
    else {
        return Err(Driver::start(task, "rollover", false).unwrap_err());
    };
    Driver::start(task, "rollover", true)?;
    let mut d = Driver {
        task,
        backend,
        observer,
    };

    let mut last: Option<BoundingBox> = None;
    for stage in 0..max_stages {
        let a = d.assignment(stage, 0, last);
        let handle = match d.backend.post(&a) {
            Ok(h) => h,
            Err(e) => match last {
                Some(best) => return finalize_partial(&mut d, best),
                None => return Err(e.into()),
            },
        };
        d.apply(TaskEvent::Posted {
            stage,
            at: a.posted_at,
        })?;
        let timeout = d.stage_timeout();
        match d.backend.await_response(&handle, timeout)? {
            AwaitResult::Response(r) => {
                d.record(&r)?;
                let converged = last.is_some_and(|prev| box_mse(&r.bbox, &prev) < convergence_eps);
                if converged || stage + 1 == max_stages {
                    d.apply(TaskEvent::Finalized {
                        final_box: r.bbox,
                        at: r.submitted_at,
                        partial: false,
                    })?;
                    return Ok(d.outcome());
                }
                last = Some(r.bbox);
            }
            AwaitResult::Timeout { at, accepted_at } => {
                d.record_unanswered_claim(&a.assignment_id, stage, accepted_at)?;
                match last {
                    Some(best) => return finalize_partial(&mut d, best),
                    None => {
                        d.apply(TaskEvent::TimedOut { at })?;
                        return Err(StrategyError::StageTimeout { stage });
                    }
                }
            }
        }
    }
    unreachable!("max_stages >= 2 guarantees the loop finalizes")
}

fn finalize_partial(d: &mut Driver<'_>, best: BoundingBox) -> Result<Outcome, StrategyError> {
    let at = d.backend.now();
    d.apply(TaskEvent::Finalized {
        final_box: best,
        at,
        partial: true,
    })?;
    Ok(d.outcome())
}

/// Posts `n_workers` assignments at once, drops outlying boxes, and
/// finalizes with the mean of the survivors.
pub fn run_parallel(
    task: &mut LabelTask,
    backend: &mut dyn CrowdBackend,
    observer: &mut dyn TaskObserver,
) -> Result<Outcome, StrategyError> {
    let StrategyKind::ParallelOneShot {
        n_workers,
        outlier_z,
    } = task.strategy.kind
    else {
        return Err(Driver::start(task, "parallel", false).unwrap_err());
    };
    Driver::start(task, "parallel", true)?;
    let mut d = Driver {
        task,
        backend,
        observer,
    };

    let mut posted: Vec<(Assignment, AssignmentHandle)> = Vec::new();
    for slot in 0..n_workers {
        let a = d.assignment(0, slot, None);
        match d.backend.post(&a) {
            Ok(h) => posted.push((a, h)),
            Err(e) => {
                for (_, h) in &posted {
                    d.backend.cancel(h)?;
                }
                return Err(e.into());
            }
        }
    }
    d.apply(TaskEvent::Posted {
        stage: 0,
        at: posted[0].0.posted_at,
    })?;

    let deadline = d.backend.now() + d.stage_timeout();
    let mut responses = Vec::new();
    let mut claims = Vec::new();
    for (a, h) in &posted {
        let left = (deadline - d.backend.now()).max(0.0);
        match d.backend.await_response(h, left)? {
            AwaitResult::Response(r) => responses.push(r),
            AwaitResult::Timeout {
                accepted_at: Some(at),
                ..
            } => claims.push((a.assignment_id.clone(), at)),
            AwaitResult::Timeout { .. } => {}
        }
    }

    // Replay what happened in time order so the task history reads correctly.
    enum Step<'r> {
        Accept(&'r str, f64),
        Respond(&'r WorkerResponse),
    }
    let mut steps: Vec<(f64, u8, Step<'_>)> = Vec::new();
    for r in &responses {
        steps.push((r.accepted_at, 0, Step::Accept(&r.assignment_id, r.accepted_at)));
        steps.push((r.submitted_at, 1, Step::Respond(r)));
    }
    for (id, at) in &claims {
        steps.push((*at, 0, Step::Accept(id, *at)));
    }
    steps.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (_, _, step) in steps {
        match step {
            Step::Accept(id, at) => d.apply(TaskEvent::Accepted {
                assignment_id: id.to_owned(),
                stage: 0,
                at,
            })?,
            Step::Respond(r) => d.apply(TaskEvent::Responded { response: r.clone() })?,
        }
    }

    if responses.len() < 2 {
        let at = d.backend.now();
        d.apply(TaskEvent::TimedOut { at })?;
        return Err(StrategyError::InsufficientResponses {
            got: responses.len(),
        });
    }
    let boxes: Vec<BoundingBox> = responses.iter().map(|r| r.bbox).collect();
    let survivors = filter_outliers(&boxes, outlier_z)?;
    let (w, h) = (f64::from(d.task.image_width), f64::from(d.task.image_height));
    let final_box = clamp_box(&mean_box(&survivors)?, w, h);
    let at = responses
        .iter()
        .map(|r| r.submitted_at)
        .fold(f64::NEG_INFINITY, f64::max);
    d.apply(TaskEvent::Finalized {
        final_box,
        at,
        partial: false,
    })?;
    Ok(d.outcome())
}
