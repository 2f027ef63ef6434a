use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};

use super::{validate_assignment, Assignment, AssignmentHandle, AwaitResult, BackendError, BackendKind, CrowdBackend};
use crate::clock::SimClock;
use crate::crowd::{perturb_box, refine_box, sample_find_latency, sample_work_duration, CrowdProfile};
use crate::geometry::BoundingBox;
use crate::rng::assignment_stream;
use crate::task::WorkerResponse;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Accept,
    Submit,
}

#[derive(Debug)]
struct Scheduled {
    at: f64,
    seq: u64,
    phase: Phase,
    assignment_id: String,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        self.at.total_cmp(&other.at).then(self.seq.cmp(&other.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Waiting,
    Accepted,
    Submitted,
    Closed,
}

#[derive(Debug)]
struct Pending {
    response: WorkerResponse,
    status: Status,
}

/// A simulated crowd driven by a single-owner discrete-event loop.
///
/// Posting draws the worker's find latency, work duration and box from the
/// assignment's own seeded stream and schedules accept and submit events.
/// Simulated time only advances while a caller awaits a response.
#[derive(Debug)]
pub struct SimulatedBackend {
    profile: CrowdProfile,
    seed: u64,
    clock: SimClock,
    queue: BinaryHeap<Reverse<Scheduled>>,
    pending: HashMap<String, Pending>,
    slots: HashMap<(String, u32), u32>,
    next_seq: u64,
}

impl SimulatedBackend {
    pub fn new(profile: CrowdProfile, seed: u64) -> Self {
        Self {
            profile,
            seed,
            clock: SimClock::new(),
            queue: BinaryHeap::new(),
            pending: HashMap::new(),
            slots: HashMap::new(),
            next_seq: 0,
        }
    }

    pub fn profile(&self) -> &CrowdProfile {
        &self.profile
    }

    /// The true box for an image of the given size: the scene truth, scaled
    /// when the image differs from the profile's scene.
    pub fn truth_for(&self, width: u32, height: u32) -> BoundingBox {
        let s = &self.profile.scene;
        let (sx, sy) = (f64::from(width) / s.width, f64::from(height) / s.height);
        BoundingBox {
            left: s.truth.left * sx,
            top: s.truth.top * sy,
            right: s.truth.right * sx,
            bottom: s.truth.bottom * sy,
        }
    }

    fn schedule(&mut self, at: f64, phase: Phase, assignment_id: &str) {
        self.next_seq += 1;
        self.queue.push(Reverse(Scheduled {
            at,
            seq: self.next_seq,
            phase,
            assignment_id: assignment_id.to_owned(),
        }));
    }

    /// Processes events up to `deadline` or until `id` is submitted.
    fn run_until(&mut self, id: &str, deadline: f64) -> bool {
        loop {
            if self.pending.get(id).map(|p| p.status) == Some(Status::Submitted) {
                return true;
            }
            let due = matches!(self.queue.peek(), Some(Reverse(ev)) if ev.at <= deadline);
            if !due {
                self.clock.advance_to(deadline);
                return false;
            }
            let Some(Reverse(ev)) = self.queue.pop() else {
                return false;
            };
            self.clock.advance_to(ev.at);
            if let Some(p) = self.pending.get_mut(&ev.assignment_id) {
                p.status = match (p.status, ev.phase) {
                    (Status::Closed, _) => Status::Closed,
                    (_, Phase::Accept) => Status::Accepted,
                    (_, Phase::Submit) => Status::Submitted,
                };
            }
        }
    }
}

impl CrowdBackend for SimulatedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Simulated
    }

    fn now(&self) -> f64 {
        self.clock.now()
    }

    fn post(&mut self, a: &Assignment) -> Result<AssignmentHandle, BackendError> {
        validate_assignment(a)?;
        if self.pending.contains_key(&a.assignment_id) {
            return Err(BackendError::DuplicateAssignment(a.assignment_id.clone()));
        }
        let slot_key = (a.task_id.clone(), a.stage);
        let slot = *self.slots.get(&slot_key).unwrap_or(&0);
        self.slots.insert(slot_key, slot + 1);

        let p = &self.profile;
        let mut rng = assignment_stream(self.seed, &a.task_id, a.stage, slot);
        let find = sample_find_latency(p, &mut rng);
        let work = sample_work_duration(p, &mut rng);
        let (w, h) = (f64::from(a.image_width), f64::from(a.image_height));
        let truth = self.truth_for(a.image_width, a.image_height);
        let bbox = match (a.stage, a.prior_box) {
            (s, Some(prev)) if s > 0 => refine_box(&prev, &truth, w, h, p, &mut rng),
            _ => perturb_box(&truth, w, h, p, &mut rng),
        };
        let listing_delay = if a.stage == 0 { p.upload_overhead_s } else { 0.0 };
        let accepted_at = a.posted_at + listing_delay + find;
        let submitted_at = accepted_at + work;

        let response = WorkerResponse {
            response_id: format!("resp-{}", a.assignment_id),
            assignment_id: a.assignment_id.clone(),
            task_id: a.task_id.clone(),
            stage: a.stage,
            worker_id: format!("sim-{}-{}-{}", a.task_id, a.stage, slot),
            bbox,
            text_label: None,
            posted_at: a.posted_at,
            accepted_at,
            submitted_at,
        };
        self.schedule(accepted_at, Phase::Accept, &a.assignment_id);
        self.schedule(submitted_at, Phase::Submit, &a.assignment_id);
        self.pending.insert(
            a.assignment_id.clone(),
            Pending {
                response,
                status: Status::Waiting,
            },
        );
        Ok(AssignmentHandle {
            assignment_id: a.assignment_id.clone(),
        })
    }

    fn await_response(
        &mut self,
        handle: &AssignmentHandle,
        timeout_s: f64,
    ) -> Result<AwaitResult, BackendError> {
        let id = &handle.assignment_id;
        match self.pending.get(id).map(|p| p.status) {
            None => return Err(BackendError::UnknownAssignment(id.clone())),
            Some(Status::Closed) => return Err(BackendError::HandleAlreadyResolved(id.clone())),
            Some(_) => {}
        }
        let deadline = self.clock.now() + timeout_s.max(0.0);
        let done = self.run_until(id, deadline);
        let p = self.pending.get_mut(id).expect("pending entry exists");
        let accepted = p.status == Status::Accepted;
        p.status = Status::Closed;
        if done {
            Ok(AwaitResult::Response(p.response.clone()))
        } else {
            Ok(AwaitResult::Timeout {
                at: deadline,
                accepted_at: accepted.then_some(p.response.accepted_at),
            })
        }
    }

    fn cancel(&mut self, handle: &AssignmentHandle) -> Result<(), BackendError> {
        if let Some(p) = self.pending.get_mut(&handle.assignment_id) {
            p.status = Status::Closed;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assignment(id: &str, stage: u32, posted_at: f64) -> Assignment {
        Assignment {
            assignment_id: id.into(),
            task_id: "task".into(),
            stage,
            snapshot_ref: "snap".into(),
            image_width: 640,
            image_height: 480,
            instructions: String::new(),
            prior_box: None,
            reward_cents: 25,
            posted_at,
            expires_at: posted_at + 900.0,
        }
    }

    #[test]
    fn deterministic_profile_resolves_at_known_time() {
        // find 10s, work 45s, upload 2s: response lands at t = 57.
        let mut b = SimulatedBackend::new(CrowdProfile::deterministic(10.0, 45.0), 1);
        let h = b.post(&assignment("a", 0, 0.0)).unwrap();
        let AwaitResult::Response(r) = b.await_response(&h, 600.0).unwrap() else {
            panic!("expected a response");
        };
        assert!((r.submitted_at - 57.0).abs() < 1e-9);
        assert_eq!(b.now(), r.submitted_at);
        assert!(r.posted_at <= r.accepted_at && r.accepted_at <= r.submitted_at);
        assert_eq!(
            b.await_response(&h, 1.0),
            Err(BackendError::HandleAlreadyResolved("a".into()))
        );
    }

    #[test]
    fn timeout_lands_exactly_on_deadline() {
        let mut p = CrowdProfile::deterministic(650.0, 48.0);
        p.upload_overhead_s = 2.0;
        let mut b = SimulatedBackend::new(p, 1);
        let h = b.post(&assignment("a", 0, 0.0)).unwrap();
        match b.await_response(&h, 600.0).unwrap() {
            AwaitResult::Timeout { at, accepted_at } => {
                assert_eq!(at, 600.0);
                assert_eq!(accepted_at, None);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(b.now(), 600.0);
    }

    #[test]
    fn duplicate_post_rejected() {
        let mut b = SimulatedBackend::new(CrowdProfile::deterministic(10.0, 45.0), 1);
        b.post(&assignment("a", 0, 0.0)).unwrap();
        assert_eq!(
            b.post(&assignment("a", 0, 0.0)),
            Err(BackendError::DuplicateAssignment("a".into()))
        );
    }

    #[test]
    fn schedule_is_reproducible() {
        let run = || {
            let mut b = SimulatedBackend::new(CrowdProfile::paper2016(), 42);
            let hs: Vec<_> = (0..5)
                .map(|i| b.post(&assignment(&format!("a{i}"), 0, 0.0)).unwrap())
                .collect();
            hs.iter()
                .map(|h| match b.await_response(h, 1e9).unwrap() {
                    AwaitResult::Response(r) => (r.accepted_at, r.submitted_at, r.bbox),
                    _ => unreachable!(),
                })
                .collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        for (acc, sub, _) in &a {
            assert!(0.0 <= *acc && acc <= sub);
        }
    }

    #[test]
    fn awaiting_a_later_handle_does_not_rewind() {
        let mut b = SimulatedBackend::new(CrowdProfile::paper2016(), 3);
        let h1 = b.post(&assignment("a1", 0, 0.0)).unwrap();
        let h2 = b.post(&assignment("a2", 0, 0.0)).unwrap();
        let r1 = b.await_response(&h1, 1e9).unwrap();
        let t1 = b.now();
        let r2 = b.await_response(&h2, 1e9).unwrap();
        assert!(b.now() >= t1);
        let (AwaitResult::Response(r1), AwaitResult::Response(r2)) = (r1, r2) else {
            unreachable!()
        };
        assert_eq!(b.now(), r1.submitted_at.max(r2.submitted_at));
    }
}
