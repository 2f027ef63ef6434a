//! The boundary between strategies and workers.
//!
//! Strategies only ever talk to a [`CrowdBackend`]: they post assignments and
//! wait for responses. The simulated backend owns a discrete-event loop over
//! simulated time; the live backend waits on a worker queue in wall-clock time.

mod live;
mod sim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoundingBox;
use crate::task::WorkerResponse;

pub use live::{ClaimedAssignment, LiveBackend, LiveQueue, SubmitAck};
pub use sim::SimulatedBackend;

/// One posted unit of work offered to one worker for one stage of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub assignment_id: String,
    pub task_id: String,
    pub stage: u32,
    pub snapshot_ref: String,
    pub image_width: u32,
    pub image_height: u32,
    pub instructions: String,
    /// The previous stage's answer, shown to rollover workers for correction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_box: Option<BoundingBox>,
    pub reward_cents: u32,
    pub posted_at: f64,
    pub expires_at: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AssignmentHandle {
    pub assignment_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AwaitResult {
    Response(WorkerResponse),
    /// Nothing arrived before the timeout. `accepted_at` is set when a worker
    /// had claimed the assignment but not submitted.
    Timeout {
        at: f64,
        accepted_at: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Simulated,
    LiveQueue,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("duplicate assignment {0}")]
    DuplicateAssignment(String),
    #[error("handle {0} already resolved")]
    HandleAlreadyResolved(String),
    #[error("unknown assignment {0}")]
    UnknownAssignment(String),
    #[error("assignment {0} expired")]
    Expired(String),
    #[error("assignment {0} already submitted")]
    AlreadySubmitted(String),
    #[error("assignment {0} is not claimed by this worker")]
    NotClaimed(String),
    #[error("invalid box for assignment {0}")]
    InvalidBox(String),
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),
}

pub trait CrowdBackend {
    fn kind(&self) -> BackendKind;

    /// Current time in this backend's domain (simulated or wall-clock seconds).
    fn now(&self) -> f64;

    fn post(&mut self, assignment: &Assignment) -> Result<AssignmentHandle, BackendError>;

    /// Waits up to `timeout_s` from now for the assignment's response.
    /// The handle is closed afterwards either way.
    fn await_response(
        &mut self,
        handle: &AssignmentHandle,
        timeout_s: f64,
    ) -> Result<AwaitResult, BackendError>;

    /// Withdraws an assignment no one has answered yet.
    fn cancel(&mut self, _handle: &AssignmentHandle) -> Result<(), BackendError> {
        Ok(())
    }
}

fn validate_assignment(a: &Assignment) -> Result<(), BackendError> {
    if !(a.expires_at > a.posted_at) {
        return Err(BackendError::InvalidAssignment(format!(
            "{} expires before it is posted",
            a.assignment_id
        )));
    }
    if a.image_width == 0 || a.image_height == 0 {
        return Err(BackendError::InvalidAssignment("empty image".into()));
    }
    if let Some(p) = &a.prior_box {
        if !p.fits_within(f64::from(a.image_width), f64::from(a.image_height)) {
            return Err(BackendError::InvalidAssignment("prior box outside image".into()));
        }
    }
    Ok(())
}
