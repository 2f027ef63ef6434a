use std::collections::{HashMap, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use super::{validate_assignment, Assignment, AssignmentHandle, AwaitResult, BackendError, BackendKind, CrowdBackend};
use crate::clock::wall_clock_s;
use crate::geometry::BoundingBox;
use crate::task::WorkerResponse;

/// An assignment handed to a worker, stamped with the claim time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimedAssignment {
    #[serde(flatten)]
    pub assignment: Assignment,
    pub worker_id: String,
    pub accepted_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub assignment_id: String,
    pub response_id: String,
}

#[derive(Debug, Clone)]
enum Status {
    Queued,
    Claimed { worker_id: String, accepted_at: f64 },
    Submitted(WorkerResponse),
    /// Timed out, cancelled or expired before anyone submitted.
    Withdrawn,
}

#[derive(Debug)]
struct Entry {
    assignment: Assignment,
    status: Status,
    resolved: bool,
}

#[derive(Debug, Default)]
struct QueueState {
    order: VecDeque<String>,
    entries: HashMap<String, Entry>,
}

/// A self-hosted worker queue: assignments wait in FIFO order until a worker
/// polls for one, and each can be claimed and answered at most once.
#[derive(Debug, Default)]
pub struct LiveQueue {
    state: Mutex<QueueState>,
    changed: Condvar,
}

impl LiveQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(&self, a: &Assignment) -> Result<(), BackendError> {
        validate_assignment(a)?;
        let mut st = self.state.lock();
        if st.entries.contains_key(&a.assignment_id) {
            return Err(BackendError::DuplicateAssignment(a.assignment_id.clone()));
        }
        st.order.push_back(a.assignment_id.clone());
        st.entries.insert(
            a.assignment_id.clone(),
            Entry {
                assignment: a.clone(),
                status: Status::Queued,
                resolved: false,
            },
        );
        Ok(())
    }

    /// Claims the oldest unclaimed, unexpired assignment for `worker_id`.
    pub fn claim(&self, worker_id: &str, now: f64) -> Option<ClaimedAssignment> {
        let mut st = self.state.lock();
        while let Some(id) = st.order.pop_front() {
            let Some(entry) = st.entries.get_mut(&id) else {
                continue;
            };
            if !matches!(entry.status, Status::Queued) {
                continue;
            }
            if entry.assignment.expires_at <= now {
                entry.status = Status::Withdrawn;
                continue;
            }
            entry.status = Status::Claimed {
                worker_id: worker_id.to_owned(),
                accepted_at: now,
            };
            let claimed = ClaimedAssignment {
                assignment: entry.assignment.clone(),
                worker_id: worker_id.to_owned(),
                accepted_at: now,
            };
            drop(st);
            self.changed.notify_all();
            return Some(claimed);
        }
        None
    }

    pub fn submit(
        &self,
        assignment_id: &str,
        worker_id: &str,
        bbox: BoundingBox,
        text_label: Option<String>,
        now: f64,
    ) -> Result<SubmitAck, BackendError> {
        let mut st = self.state.lock();
        let entry = st
            .entries
            .get_mut(assignment_id)
            .ok_or_else(|| BackendError::UnknownAssignment(assignment_id.to_owned()))?;
        let a = &entry.assignment;
        let accepted_at = match &entry.status {
            Status::Submitted(_) => {
                return Err(BackendError::AlreadySubmitted(assignment_id.to_owned()))
            }
            Status::Withdrawn => return Err(BackendError::Expired(assignment_id.to_owned())),
            Status::Queued => return Err(BackendError::NotClaimed(assignment_id.to_owned())),
            Status::Claimed {
                worker_id: owner,
                accepted_at,
            } => {
                if owner != worker_id {
                    return Err(BackendError::NotClaimed(assignment_id.to_owned()));
                }
                *accepted_at
            }
        };
        if now > a.expires_at {
            entry.status = Status::Withdrawn;
            return Err(BackendError::Expired(assignment_id.to_owned()));
        }
        if !bbox.fits_within(f64::from(a.image_width), f64::from(a.image_height)) {
            return Err(BackendError::InvalidBox(assignment_id.to_owned()));
        }
        let response = WorkerResponse {
            response_id: format!("resp-{assignment_id}"),
            assignment_id: assignment_id.to_owned(),
            task_id: a.task_id.clone(),
            stage: a.stage,
            worker_id: worker_id.to_owned(),
            bbox,
            text_label,
            posted_at: a.posted_at,
            accepted_at,
            submitted_at: now.max(accepted_at),
        };
        let ack = SubmitAck {
            assignment_id: assignment_id.to_owned(),
            response_id: response.response_id.clone(),
        };
        entry.status = Status::Submitted(response);
        drop(st);
        self.changed.notify_all();
        Ok(ack)
    }

    /// Blocks until the assignment is answered or `timeout` elapses.
    pub fn wait(&self, assignment_id: &str, timeout: Duration) -> Result<AwaitResult, BackendError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock();
        loop {
            let entry = st
                .entries
                .get_mut(assignment_id)
                .ok_or_else(|| BackendError::UnknownAssignment(assignment_id.to_owned()))?;
            if entry.resolved {
                return Err(BackendError::HandleAlreadyResolved(assignment_id.to_owned()));
            }
            match &entry.status {
                Status::Submitted(r) => {
                    let r = r.clone();
                    entry.resolved = true;
                    return Ok(AwaitResult::Response(r));
                }
                Status::Withdrawn => {
                    entry.resolved = true;
                    return Ok(AwaitResult::Timeout {
                        at: wall_clock_s(),
                        accepted_at: None,
                    });
                }
                _ => {}
            }
            if Instant::now() >= deadline {
                let accepted_at = match entry.status {
                    Status::Claimed { accepted_at, .. } => Some(accepted_at),
                    _ => None,
                };
                entry.status = Status::Withdrawn;
                entry.resolved = true;
                return Ok(AwaitResult::Timeout {
                    at: wall_clock_s(),
                    accepted_at,
                });
            }
            self.changed.wait_until(&mut st, deadline);
        }
    }

    /// Withdraws an assignment that has not been answered.
    pub fn withdraw(&self, assignment_id: &str) {
        let mut st = self.state.lock();
        if let Some(e) = st.entries.get_mut(assignment_id) {
            if !matches!(e.status, Status::Submitted(_)) {
                e.status = Status::Withdrawn;
            }
        }
        drop(st);
        self.changed.notify_all();
    }

    /// Number of assignments waiting to be claimed.
    pub fn queued(&self) -> usize {
        let st = self.state.lock();
        st.entries
            .values()
            .filter(|e| matches!(e.status, Status::Queued))
            .count()
    }
}

/// [`CrowdBackend`] over a shared [`LiveQueue`], in wall-clock seconds.
#[derive(Debug, Clone)]
pub struct LiveBackend {
    queue: Arc<LiveQueue>,
}

impl LiveBackend {
    pub fn new(queue: Arc<LiveQueue>) -> Self {
        Self { queue }
    }
}

impl CrowdBackend for LiveBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::LiveQueue
    }

    fn now(&self) -> f64 {
        wall_clock_s()
    }

    fn post(&mut self, assignment: &Assignment) -> Result<AssignmentHandle, BackendError> {
        self.queue.enqueue(assignment)?;
        Ok(AssignmentHandle {
            assignment_id: assignment.assignment_id.clone(),
        })
    }

    fn await_response(
        &mut self,
        handle: &AssignmentHandle,
        timeout_s: f64,
    ) -> Result<AwaitResult, BackendError> {
        let timeout = Duration::from_secs_f64(timeout_s.max(0.0));
        self.queue.wait(&handle.assignment_id, timeout)
    }

    fn cancel(&mut self, handle: &AssignmentHandle) -> Result<(), BackendError> {
        self.queue.withdraw(&handle.assignment_id);
        Ok(())
    }
}
