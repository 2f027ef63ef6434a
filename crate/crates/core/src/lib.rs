//! Crowd-labeling broker core: box geometry, a seeded crowd model, labeling
//! strategies over a task state machine, crowd backends, experiments and the
//! event-log store.

pub mod backend;
pub mod clock;
pub mod crowd;
pub mod geometry;
pub mod harness;
pub mod rng;
pub mod store;
pub mod strategy;
pub mod task;

pub use backend::{
    Assignment, AssignmentHandle, AwaitResult, BackendError, BackendKind, CrowdBackend,
    LiveBackend, LiveQueue, SimulatedBackend,
};
pub use crowd::{CrowdProfile, Scene};
pub use geometry::{
    box_mse, clamp_box, filter_outliers, mean_box, quality_stats, BoundingBox, GeometryError,
    QualityStats,
};
pub use harness::{compare, run_experiment, Comparison, TrialReport};
pub use store::{replay, EventLog, EventRecord, LogEvent, SnapshotMeta, StoreError, TaskStore};
pub use strategy::{run_strategy, Outcome, StrategyError, TaskObserver};
pub use task::{
    LabelTask, StrategyConfig, StrategyKind, TaskError, TaskEvent, TaskState, WorkerResponse,
};
