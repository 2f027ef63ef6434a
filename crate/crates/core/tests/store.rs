use nimbus_core::backend::SimulatedBackend;
use nimbus_core::crowd::CrowdProfile;
use nimbus_core::store::{replay, replay_prefix, EventLog, EventRecord, LogEvent, SnapshotMeta, StoreError, TaskStore};
use nimbus_core::strategy::run_strategy;
use nimbus_core::task::{LabelTask, StrategyConfig, TaskEvent, TaskState};
use proptest::prelude::*;

fn snapshot(id: &str) -> SnapshotMeta {
    SnapshotMeta {
        snapshot_id: id.into(),
        width: 640,
        height: 480,
        content_hash: "00".repeat(32),
        content_type: "image/png".into(),
        byte_len: 1234,
        captured_at: 0.0,
    }
}

/// Creation plus every transition of one simulated task, as log records.
fn trace(task_id: &str, cfg: StrategyConfig, seed: u64, first_seq: u64) -> Vec<EventRecord> {
    let mut task = LabelTask::new(task_id, format!("snap-{task_id}"), 640, 480, "box it", 25, cfg, 0.0);
    let mut recs = vec![EventRecord {
        seq: first_seq,
        timestamp: 0.0,
        task_id: task_id.into(),
        event: LogEvent::TaskCreated {
            task: task.clone(),
            snapshot: snapshot(&task.snapshot_ref),
            idempotency_key: Some(format!("key-{task_id}")),
        },
    }];
    let mut events: Vec<TaskEvent> = Vec::new();
    let mut obs = |_: &LabelTask, e: &TaskEvent| events.push(e.clone());
    let mut backend = SimulatedBackend::new(CrowdProfile::paper2016(), seed);
    let _ = run_strategy(&mut task, &mut backend, &mut obs);
    for (i, e) in events.into_iter().enumerate() {
        recs.push(EventRecord {
            seq: first_seq + 1 + i as u64,
            timestamp: 0.0,
            task_id: task_id.into(),
            event: LogEvent::Transition { event: e },
        });
    }
    recs
}

fn encode(recs: &[EventRecord]) -> String {
    recs.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect()
}

#[test]
fn empty_log_is_empty_store() {
    assert_eq!(replay("").unwrap(), TaskStore::new());
    assert_eq!(replay("\n\n").unwrap(), TaskStore::new());
}

#[test]
fn one_shot_trace_replays_to_finalized_task() {
    let recs = trace("t1", StrategyConfig::one_shot(), 3, 1);
    let store = replay(&encode(&recs)).unwrap();
    assert_eq!(store.tasks.len(), 1);
    let t = &store.tasks["t1"];
    assert_eq!(t.state, TaskState::Finalized);
    assert_eq!(t.responses.len(), 1);
    assert_eq!(store.idempotency["key-t1"], "t1");
    assert_eq!(store.snapshots.len(), 1);
    assert_eq!(store.last_seq, recs.len() as u64);
}

#[test]
fn truncated_final_record_pinpoints_its_seq() {
    let recs = trace("t1", StrategyConfig::rollover(4, 0.0), 5, 1);
    let full = encode(&recs);
    let cut = &full[..full.len() - 7];
    let err = replay(cut).unwrap_err();
    let last = recs.last().unwrap().seq;
    assert!(matches!(err, StoreError::CorruptLog { seq, .. } if seq == last), "{err}");

    let partial = replay_prefix(cut);
    assert_eq!(partial.store.last_seq, last - 1);
    assert_eq!(partial.store, replay(&encode(&recs[..recs.len() - 1])).unwrap());
}

#[test]
fn out_of_order_and_unknown_records_are_rejected() {
    let mut recs = trace("t1", StrategyConfig::one_shot(), 3, 1);
    recs.swap(1, 2);
    let err = replay(&encode(&recs)).unwrap_err();
    assert!(matches!(err, StoreError::CorruptLog { seq: 3, .. }), "{err}");

    let recs = trace("t1", StrategyConfig::one_shot(), 3, 1);
    let orphan = EventRecord {
        task_id: "ghost".into(),
        ..recs[1].clone()
    };
    let err = replay(&encode(&[recs[0].clone(), orphan])).unwrap_err();
    assert!(matches!(err, StoreError::CorruptLog { seq: 2, .. }));
}

#[test]
fn reopened_log_drops_torn_tail_and_keeps_appending() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let recs = trace("t1", StrategyConfig::one_shot(), 3, 1);
    {
        let (mut log, replayed) = EventLog::open(&path).unwrap();
        assert_eq!(replayed.store, TaskStore::new());
        for r in &recs {
            log.append(r).unwrap();
        }
    }
    // Simulate a crash in the middle of writing another record.
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.extend_from_slice(b"{\"seq\":99,\"timest");
    std::fs::write(&path, &bytes).unwrap();

    let (mut log, replayed) = EventLog::open(&path).unwrap();
    assert!(replayed.error.is_some());
    assert_eq!(replayed.store.tasks["t1"].state, TaskState::Finalized);
    assert_eq!(log.next_seq(), recs.len() as u64 + 1);
    for r in trace("t2", StrategyConfig::parallel(4, 2.0), 8, log.next_seq()) {
        log.append(&r).unwrap();
    }
    drop(log);
    let store = replay(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(store.tasks.len(), 2);
}

#[test]
fn append_refuses_out_of_sequence_records() {
    let dir = tempfile::tempdir().unwrap();
    let (mut log, _) = EventLog::open(&dir.path().join("e.jsonl")).unwrap();
    let r = log.prepare(0.0, "t1", LogEvent::Transition { event: TaskEvent::TimedOut { at: 1.0 } });
    let skipped = EventRecord { seq: r.seq + 1, ..r };
    assert!(log.append(&skipped).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_prefix_replays_to_a_legal_store(seed in any::<u64>(), which in 0usize..3) {
        let cfg = [
            StrategyConfig::one_shot(),
            StrategyConfig::rollover(5, 0.0),
            StrategyConfig::parallel(5, 2.0),
        ][which];
        let mut recs = trace("a", cfg, seed, 1);
        let next = recs.len() as u64 + 1;
        recs.extend(trace("b", StrategyConfig::one_shot(), seed ^ 1, next));
        let text = encode(&recs);
        let mut offsets = vec![0];
        offsets.extend(text.match_indices('\n').map(|(i, _)| i + 1));
        for end in offsets {
            let store = replay(&text[..end]).unwrap();
            for t in store.tasks.values() {
                prop_assert!(t.check_invariants().is_ok());
            }
        }
        // A cut inside a record keeps everything before it.
        let mid = text.len() / 2;
        let p = replay_prefix(&text[..mid]);
        prop_assert!(p.valid_len <= mid);
        prop_assert_eq!(p.store, replay(&text[..p.valid_len]).unwrap());
    }
}
