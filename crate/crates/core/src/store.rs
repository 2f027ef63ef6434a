//! Append-only event log and the task store it rebuilds.
//!
//! The log is JSON lines, one [`EventRecord`] per line. A store is nothing but
//! the fold of its records, so the service applies each record to its
//! in-memory store as it appends it, and a restarted service gets the same
//! store back by replaying the file.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::{advance, LabelTask, TaskEvent, TaskState};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("corrupt log at seq {seq}: {reason}")]
    CorruptLog { seq: u64, reason: String },
    #[error("storage failure: {0}")]
    Io(#[from] io::Error),
    #[error("serialize: {0}")]
    Json(#[from] serde_json::Error),
}

/// A stored snapshot image. Bytes live in a content-addressed file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub snapshot_id: String,
    pub width: u32,
    pub height: u32,
    /// Lowercase hex SHA-256 of the stored bytes.
    pub content_hash: String,
    pub content_type: String,
    pub byte_len: u64,
    pub captured_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEvent {
    TaskCreated {
        task: LabelTask,
        snapshot: SnapshotMeta,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        idempotency_key: Option<String>,
    },
    Transition {
        event: TaskEvent,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub timestamp: f64,
    pub task_id: String,
    pub event: LogEvent,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskStore {
    pub tasks: BTreeMap<String, LabelTask>,
    pub snapshots: BTreeMap<String, SnapshotMeta>,
    /// Idempotency key to the task it created.
    pub idempotency: BTreeMap<String, String>,
    pub last_seq: u64,
}

impl TaskStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn task(&self, id: &str) -> Option<&LabelTask> {
        self.tasks.get(id)
    }

    /// Applies one record; the store is unchanged on error.
    pub fn apply(&mut self, rec: &EventRecord) -> Result<(), StoreError> {
        let change = self.plan(rec)?;
        self.commit(change);
        Ok(())
    }

    /// Validates `rec` against the current store without changing it.
    pub fn plan(&self, rec: &EventRecord) -> Result<Change, StoreError> {
        let corrupt = |reason: String| StoreError::CorruptLog {
            seq: rec.seq,
            reason,
        };
        if rec.seq <= self.last_seq {
            return Err(corrupt(format!("seq not increasing (last {})", self.last_seq)));
        }
        let kind = match &rec.event {
            LogEvent::TaskCreated {
                task,
                snapshot,
                idempotency_key,
            } => {
                if task.task_id != rec.task_id {
                    return Err(corrupt("task id mismatch".into()));
                }
                if self.tasks.contains_key(&task.task_id) {
                    return Err(corrupt(format!("task {} created twice", task.task_id)));
                }
                if task.state != TaskState::Created || task.check_invariants().is_err() {
                    return Err(corrupt("created task is not fresh".into()));
                }
                if let Some(key) = idempotency_key {
                    if self.idempotency.contains_key(key) {
                        return Err(corrupt(format!("idempotency key {key} reused")));
                    }
                }
                ChangeKind::Create {
                    task: task.clone(),
                    snapshot: snapshot.clone(),
                    idempotency_key: idempotency_key.clone(),
                }
            }
            LogEvent::Transition { event } => {
                let Some(task) = self.tasks.get(&rec.task_id) else {
                    return Err(corrupt(format!("unknown task {}", rec.task_id)));
                };
                ChangeKind::Update(advance(task, event).map_err(|e| corrupt(e.to_string()))?)
            }
        };
        Ok(Change { seq: rec.seq, kind })
    }

    /// Installs a change produced by [`plan`](Self::plan) on this store.
    pub fn commit(&mut self, change: Change) {
        match change.kind {
            ChangeKind::Create {
                task,
                snapshot,
                idempotency_key,
            } => {
                if let Some(key) = idempotency_key {
                    self.idempotency.insert(key, task.task_id.clone());
                }
                self.snapshots.insert(snapshot.snapshot_id.clone(), snapshot);
                self.tasks.insert(task.task_id.clone(), task);
            }
            ChangeKind::Update(task) => {
                self.tasks.insert(task.task_id.clone(), task);
            }
        }
        self.last_seq = change.seq;
    }
}

/// A validated record, ready to commit.
#[derive(Debug, Clone, PartialEq)]
pub struct Change {
    seq: u64,
    kind: ChangeKind,
}

#[derive(Debug, Clone, PartialEq)]
enum ChangeKind {
    Create {
        task: LabelTask,
        snapshot: SnapshotMeta,
        idempotency_key: Option<String>,
    },
    Update(LabelTask),
}

impl Change {
    pub fn task(&self) -> &LabelTask {
        match &self.kind {
            ChangeKind::Create { task, .. } | ChangeKind::Update(task) => task,
        }
    }
}

/// Result of replaying as much of a log as is valid.
#[derive(Debug)]
pub struct Replayed {
    pub store: TaskStore,
    /// Byte length of the valid prefix.
    pub valid_len: usize,
    pub error: Option<StoreError>,
}

/// Replays records until the first bad one.
pub fn replay_prefix(text: &str) -> Replayed {
    let mut store = TaskStore::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if body.trim().is_empty() {
            offset += line.len();
            continue;
        }
        let expected_seq = store.last_seq + 1;
        let parsed = if line.ends_with('\n') {
            serde_json::from_str::<EventRecord>(body).map_err(|e| e.to_string())
        } else {
            // A record is only durable once its newline is written.
            Err("truncated record".to_string())
        };
        let result = parsed
            .map_err(|reason| StoreError::CorruptLog {
                seq: expected_seq,
                reason,
            })
            .and_then(|rec| store.apply(&rec));
        if let Err(e) = result {
            return Replayed {
                store,
                valid_len: offset,
                error: Some(e),
            };
        }
        offset += line.len();
    }
    Replayed {
        store,
        valid_len: offset,
        error: None,
    }
}

/// Strict replay: any bad record is an error.
pub fn replay(text: &str) -> Result<TaskStore, StoreError> {
    let r = replay_prefix(text);
    match r.error {
        Some(e) => Err(e),
        None => Ok(r.store),
    }
}

pub fn encode_record(rec: &EventRecord) -> Result<String, StoreError> {
    let mut line = serde_json::to_string(rec)?;
    line.push('\n');
    Ok(line)
}

/// Single-writer appender for the log file.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    next_seq: u64,
}

impl EventLog {
    /// Opens (or creates) the log, replays its valid prefix and cuts off any
    /// partial or corrupt tail so later appends start on a clean record.
    pub fn open(path: &Path) -> Result<(Self, Replayed), StoreError> {
        let bytes = match std::fs::read(path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let raw_len = bytes.len();
        // Undecodable bytes can only be a corrupt tail; keep the valid prefix.
        let text = match String::from_utf8(bytes) {
            Ok(t) => t,
            Err(e) => {
                let n = e.utf8_error().valid_up_to();
                let mut bytes = e.into_bytes();
                bytes.truncate(n);
                String::from_utf8(bytes).expect("valid utf-8 prefix")
            }
        };
        let replayed = replay_prefix(&text);
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(false)
            .open(path)?;
        if replayed.valid_len < raw_len {
            file.set_len(replayed.valid_len as u64)?;
        }
        let mut log = Self {
            path: path.to_owned(),
            file,
            next_seq: replayed.store.last_seq + 1,
        };
        log.seek_end()?;
        Ok((log, replayed))
    }

    fn seek_end(&mut self) -> io::Result<()> {
        use std::io::Seek;
        self.file.seek(io::SeekFrom::End(0)).map(|_| ())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Builds the next record without writing it.
    pub fn prepare(&self, timestamp: f64, task_id: &str, event: LogEvent) -> EventRecord {
        EventRecord {
            seq: self.next_seq,
            timestamp,
            task_id: task_id.to_owned(),
            event,
        }
    }

    /// Writes and flushes a record produced by [`prepare`](Self::prepare).
    pub fn append(&mut self, rec: &EventRecord) -> Result<(), StoreError> {
        if rec.seq != self.next_seq {
            return Err(StoreError::CorruptLog {
                seq: rec.seq,
                reason: format!("expected seq {}", self.next_seq),
            });
        }
        self.file.write_all(encode_record(rec)?.as_bytes())?;
        self.file.flush()?;
        self.next_seq += 1;
        Ok(())
    }

    pub fn sync(&self) -> Result<(), StoreError> {
        self.file.sync_data()?;
        Ok(())
    }
}
