//! The service's shared state: the task store, its event log, the live worker
//! queue and the strategy threads driving tasks.
//!
//! Every state change is written to the log before it becomes visible in the
//! store, under one log lock, so the in-memory store is always exactly what a
//! replay of the log would produce.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use nimbus_core::backend::{
    BackendError, BackendKind, ClaimedAssignment, CrowdBackend, LiveBackend, LiveQueue,
    SimulatedBackend, SubmitAck,
};
use nimbus_core::clock::wall_clock_s;
use nimbus_core::crowd::CrowdProfile;
use nimbus_core::geometry::BoundingBox;
use nimbus_core::rng::{derive_seed, fnv1a};
use nimbus_core::store::{EventLog, LogEvent, SnapshotMeta, StoreError, TaskStore};
use nimbus_core::strategy::run_strategy;
use nimbus_core::task::{LabelTask, StrategyConfig, StrategyKind, TaskError, TaskEvent, TaskState, WorkerResponse};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ServiceConfig;
use crate::images::{ImageError, ImageStore};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid image: {0}")]
    InvalidImage(#[from] ImageError),
    #[error(transparent)]
    InvalidConfig(#[from] TaskError),
    #[error("storage failure: {0}")]
    Storage(#[from] StoreError),
    #[error("profile: {0}")]
    Profile(#[from] nimbus_core::crowd::ProfileError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("service halted")]
    Halted,
}

/// Strategy settings as clients send them; unset timeouts use the service defaults.
#[derive(Debug, Clone, Deserialize)]
pub struct StrategyRequest {
    #[serde(flatten)]
    pub kind: StrategyKind,
    pub per_stage_timeout_s: Option<f64>,
    pub overall_timeout_s: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateTaskRequest {
    #[serde(default)]
    pub instructions: String,
    #[serde(default = "default_reward")]
    pub reward_cents: u32,
    pub strategy: Option<StrategyRequest>,
}

fn default_reward() -> u32 {
    25
}

impl Default for CreateTaskRequest {
    fn default() -> Self {
        Self {
            instructions: String::new(),
            reward_cents: default_reward(),
            strategy: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct SubmitRequest {
    pub worker_id: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default)]
    pub text_label: Option<String>,
}

/// Read-only view of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    /// Display form, e.g. `Posted(0)`.
    pub state: String,
    pub stage: Option<u32>,
    pub terminal: bool,
    pub strategy: StrategyConfig,
    pub instructions: String,
    pub reward_cents: u32,
    pub snapshot_id: String,
    pub image_url: String,
    pub image_width: u32,
    pub image_height: u32,
    pub responses: Vec<WorkerResponse>,
    pub final_box: Option<BoundingBox>,
    pub partial: bool,
    pub created_at: f64,
    pub finalized_at: Option<f64>,
    pub total_latency_s: Option<f64>,
    pub per_stage_latencies_s: Vec<f64>,
    /// `wall_clock_s` (Unix seconds) or `simulated_s` (seconds from task creation).
    pub time_domain: String,
}

pub fn image_url(snapshot_id: &str) -> String {
    format!("/api/images/{snapshot_id}")
}

fn time_domain(kind: BackendKind) -> &'static str {
    match kind {
        BackendKind::Simulated => "simulated_s",
        BackendKind::LiveQueue => "wall_clock_s",
    }
}

impl TaskView {
    fn new(t: &LabelTask, kind: BackendKind) -> Self {
        let stages = t.responses.iter().map(|r| r.stage + 1).max().unwrap_or(0);
        let per_stage = (0..stages)
            .map(|s| {
                let rs = t.responses.iter().filter(|r| r.stage == s);
                let posted = rs.clone().map(|r| r.posted_at).fold(f64::INFINITY, f64::min);
                rs.map(|r| r.submitted_at).fold(f64::NEG_INFINITY, f64::max) - posted
            })
            .collect();
        Self {
            task_id: t.task_id.clone(),
            state: t.state.to_string(),
            stage: t.state.stage(),
            terminal: t.state.is_terminal(),
            strategy: t.strategy,
            instructions: t.instructions.clone(),
            reward_cents: t.reward_cents,
            snapshot_id: t.snapshot_ref.clone(),
            image_url: image_url(&t.snapshot_ref),
            image_width: t.image_width,
            image_height: t.image_height,
            responses: t.responses.clone(),
            final_box: t.final_box,
            partial: t.partial,
            created_at: t.created_at,
            finalized_at: t.finalized_at,
            total_latency_s: (t.state == TaskState::Finalized)
                .then(|| t.finalized_at.map(|f| f - t.created_at))
                .flatten(),
            per_stage_latencies_s: per_stage,
            time_domain: time_domain(kind).into(),
        }
    }
}

pub struct Broker {
    config: ServiceConfig,
    store: RwLock<TaskStore>,
    log: Mutex<EventLog>,
    queue: Arc<LiveQueue>,
    images: ImageStore,
    profile: CrowdProfile,
    halted: AtomicBool,
}

impl Broker {
    /// Opens the data directory, replays the log and resumes work: tasks that
    /// never started are launched, tasks caught mid-flight are timed out
    /// because their live assignments did not survive the restart.
    pub fn open(config: ServiceConfig) -> Result<Arc<Self>, ServiceError> {
        std::fs::create_dir_all(&config.data_dir)?;
        let images = ImageStore::open(&config.image_dir())?;
        let (log, replayed) = EventLog::open(&config.log_path())?;
        if let Some(e) = &replayed.error {
            tracing::warn!("discarded log tail: {e}");
        }
        let profile = match &config.profile {
            Some(p) => CrowdProfile::load(p)?,
            None => CrowdProfile::paper2016(),
        };
        let broker = Arc::new(Self {
            config,
            store: RwLock::new(replayed.store),
            log: Mutex::new(log),
            queue: Arc::new(LiveQueue::new()),
            images,
            profile,
            halted: AtomicBool::new(false),
        });
        broker.recover()?;
        Ok(broker)
    }

    fn recover(self: &Arc<Self>) -> Result<(), ServiceError> {
        let tasks: Vec<LabelTask> = self.store.read().tasks.values().cloned().collect();
        for t in tasks {
            match t.state {
                TaskState::Created => self.launch(t.task_id.clone()),
                s if !s.is_terminal() => {
                    let last = t
                        .responses
                        .iter()
                        .map(|r| r.submitted_at)
                        .fold(t.created_at, f64::max);
                    let at = match self.config.backend {
                        BackendKind::LiveQueue => wall_clock_s().max(last),
                        BackendKind::Simulated => last,
                    };
                    // Same outcome as a stage timeout: rollover keeps its last answer.
                    let event = match (t.strategy.kind, t.responses.last()) {
                        (StrategyKind::Rollover { .. }, Some(r)) => TaskEvent::Finalized {
                            final_box: r.bbox,
                            at,
                            partial: true,
                        },
                        _ => TaskEvent::TimedOut { at },
                    };
                    tracing::info!(task = %t.task_id, state = %s, "closing task interrupted by restart: {}", event.name());
                    self.persist(&t.task_id, LogEvent::Transition { event })?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.config.backend
    }

    pub fn queue(&self) -> &Arc<LiveQueue> {
        &self.queue
    }

    /// Stops all further writes, as if the process had died.
    pub fn halt(&self) {
        self.halted.store(true, Ordering::SeqCst);
    }

    pub fn store_snapshot(&self) -> TaskStore {
        self.store.read().clone()
    }

    fn now(&self) -> f64 {
        match self.config.backend {
            BackendKind::LiveQueue => wall_clock_s(),
            BackendKind::Simulated => 0.0,
        }
    }

    /// Writes one record to the log, then installs it in the store.
    fn persist(&self, task_id: &str, event: LogEvent) -> Result<(), ServiceError> {
        let mut log = self.log.lock();
        if self.halted.load(Ordering::SeqCst) {
            return Err(ServiceError::Halted);
        }
        let rec = log.prepare(wall_clock_s(), task_id, event);
        let change = self.store.read().plan(&rec)?;
        log.append(&rec)?;
        self.store.write().commit(change);
        Ok(())
    }

    /// Stores the snapshot and the new task, then starts its strategy.
    /// Returns the task id and whether this call created it.
    pub fn create_task(
        self: &Arc<Self>,
        image: &[u8],
        req: CreateTaskRequest,
        idempotency_key: Option<String>,
    ) -> Result<(String, bool), ServiceError> {
        if let Some(key) = &idempotency_key {
            if let Some(id) = self.store.read().idempotency.get(key) {
                return Ok((id.clone(), false));
            }
        }
        let strategy = match req.strategy {
            None => StrategyConfig {
                per_stage_timeout_s: self.config.per_stage_timeout_s,
                overall_timeout_s: self.config.overall_timeout_s,
                ..StrategyConfig::one_shot()
            },
            Some(s) => StrategyConfig {
                kind: s.kind,
                per_stage_timeout_s: s.per_stage_timeout_s.unwrap_or(self.config.per_stage_timeout_s),
                overall_timeout_s: s.overall_timeout_s.unwrap_or(self.config.overall_timeout_s),
            },
        };
        strategy.validate()?;
        let stored = self.images.put(image)?;

        let task_id = {
            let mut log = self.log.lock();
            if self.halted.load(Ordering::SeqCst) {
                return Err(ServiceError::Halted);
            }
            if let Some(key) = &idempotency_key {
                if let Some(id) = self.store.read().idempotency.get(key) {
                    return Ok((id.clone(), false));
                }
            }
            let task_id = format!("task-{:06}", log.next_seq());
            let now = self.now();
            let task = LabelTask::new(
                task_id.clone(),
                stored.hash.clone(),
                stored.width,
                stored.height,
                req.instructions,
                req.reward_cents,
                strategy,
                now,
            );
            let snapshot = SnapshotMeta {
                snapshot_id: stored.hash.clone(),
                width: stored.width,
                height: stored.height,
                content_hash: stored.hash,
                content_type: stored.content_type,
                byte_len: stored.byte_len,
                captured_at: wall_clock_s(),
            };
            let rec = log.prepare(
                wall_clock_s(),
                &task_id,
                LogEvent::TaskCreated {
                    task,
                    snapshot,
                    idempotency_key,
                },
            );
            let change = self.store.read().plan(&rec)?;
            log.append(&rec)?;
            self.store.write().commit(change);
            task_id
        };
        self.launch(task_id.clone());
        Ok((task_id, true))
    }

    fn launch(self: &Arc<Self>, task_id: String) {
        let me = Arc::clone(self);
        thread::Builder::new()
            .name(format!("strategy-{task_id}"))
            .spawn(move || me.drive(&task_id))
            .expect("spawn strategy thread");
    }

    fn drive(&self, task_id: &str) {
        let Some(mut task) = self.store.read().task(task_id).cloned() else {
            return;
        };
        let mut backend: Box<dyn CrowdBackend> = match self.config.backend {
            BackendKind::LiveQueue => Box::new(LiveBackend::new(Arc::clone(&self.queue))),
            BackendKind::Simulated => {
                let seed = derive_seed(self.config.sim_seed, fnv1a(task_id.as_bytes()));
                Box::new(SimulatedBackend::new(self.profile.clone(), seed))
            }
        };
        let mut observer = |_: &LabelTask, e: &TaskEvent| {
            if let Err(err) = self.persist(task_id, LogEvent::Transition { event: e.clone() }) {
                tracing::error!(task = task_id, "could not persist {}: {err}", e.name());
            }
        };
        match run_strategy(&mut task, backend.as_mut(), &mut observer) {
            Ok(o) => tracing::info!(task = task_id, latency_s = o.total_latency_s, "finalized"),
            Err(e) => tracing::warn!(task = task_id, "strategy ended: {e}"),
        }
    }

    pub fn get_task(&self, task_id: &str) -> Option<TaskView> {
        self.store
            .read()
            .task(task_id)
            .map(|t| TaskView::new(t, self.config.backend))
    }

    pub fn list_tasks(&self) -> Vec<TaskView> {
        self.store
            .read()
            .tasks
            .values()
            .map(|t| TaskView::new(t, self.config.backend))
            .collect()
    }

    pub fn snapshot(&self, id: &str) -> Option<SnapshotMeta> {
        self.store.read().snapshots.get(id).cloned()
    }

    pub fn image_bytes(&self, id: &str) -> Result<Vec<u8>, ImageError> {
        self.images.get(id)
    }

    pub fn next_assignment(&self, worker_id: &str) -> Option<ClaimedAssignment> {
        self.queue.claim(worker_id, wall_clock_s())
    }

    pub fn submit(&self, assignment_id: &str, req: SubmitRequest) -> Result<SubmitAck, BackendError> {
        self.queue.submit(
            assignment_id,
            &req.worker_id,
            req.bbox,
            req.text_label,
            wall_clock_s(),
        )
    }
}
