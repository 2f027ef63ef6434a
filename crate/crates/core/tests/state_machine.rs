use std::collections::HashMap;

use nimbus_core::geometry::BoundingBox;
use nimbus_core::task::{LabelTask, StrategyConfig, TaskEvent, TaskState, WorkerResponse};
use proptest::prelude::*;

fn configs() -> impl Strategy<Value = StrategyConfig> {
    prop_oneof![
        Just(StrategyConfig::one_shot()),
        (2u32..5).prop_map(|k| StrategyConfig::rollover(k, 0.5)),
        (2u32..5).prop_map(|n| StrategyConfig::parallel(n, 2.0)),
    ]
}

fn boxes() -> impl Strategy<Value = BoundingBox> {
    prop_oneof![
        4 => Just(BoundingBox { left: 10.0, top: 10.0, right: 50.0, bottom: 40.0 }),
        1 => Just(BoundingBox { left: 10.0, top: 10.0, right: 900.0, bottom: 40.0 }),
    ]
}

fn events() -> impl Strategy<Value = TaskEvent> {
    let id = (0u32..4, 0u32..3).prop_map(|(w, s)| format!("t1-s{s}-w{w}"));
    let at = 0.0f64..500.0;
    prop_oneof![
        (0u32..4, at.clone()).prop_map(|(stage, at)| TaskEvent::Posted { stage, at }),
        (id.clone(), 0u32..4, at.clone())
            .prop_map(|(assignment_id, stage, at)| TaskEvent::Accepted { assignment_id, stage, at }),
        (id, 0u32..4, at.clone(), 0.0f64..50.0, boxes(), prop::bool::weighted(0.95)).prop_map(
            |(assignment_id, stage, at, work, bbox, same_task)| TaskEvent::Responded {
                response: WorkerResponse {
                    response_id: format!("r-{assignment_id}"),
                    assignment_id,
                    task_id: if same_task { "t1".into() } else { "t2".into() },
                    stage,
                    worker_id: "w".into(),
                    bbox,
                    text_label: None,
                    posted_at: at,
                    accepted_at: at,
                    submitted_at: at + work,
                },
            }
        ),
        (boxes(), at.clone(), any::<bool>())
            .prop_map(|(final_box, at, partial)| TaskEvent::Finalized { final_box, at, partial }),
        at.prop_map(|at| TaskEvent::TimedOut { at }),
    ]
}

/// Checks beyond the task's own invariant checker.
fn legal(t: &LabelTask) -> Result<(), String> {
    t.check_invariants()?;
    let cap = match t.strategy.kind {
        nimbus_core::task::StrategyKind::ParallelOneShot { n_workers, .. } => n_workers as usize,
        _ => 1,
    };
    let mut per_stage: HashMap<u32, usize> = HashMap::new();
    for r in &t.responses {
        *per_stage.entry(r.stage).or_default() += 1;
    }
    if per_stage.values().any(|n| *n > cap) {
        return Err("stage over capacity".into());
    }
    if let nimbus_core::task::StrategyKind::Rollover { max_stages, .. } = t.strategy.kind {
        if t.state.stage().is_some_and(|s| s >= max_stages) {
            return Err("stage beyond chain length".into());
        }
    }
    if t.state.is_terminal() && !t.open_assignments.is_empty() {
        return Err("terminal task with open assignments".into());
    }
    if matches!(t.state, TaskState::Answered(_) | TaskState::Finalized) && t.responses.is_empty() && !t.partial {
        return Err("answered without a response".into());
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn random_event_sequences_stay_legal(cfg in configs(), evs in prop::collection::vec(events(), 0..40)) {
        let mut t = LabelTask::new("t1", "snap", 640, 480, "", 25, cfg, 0.0);
        for e in &evs {
            let before = t.clone();
            match t.apply(e) {
                Ok(()) => {
                    prop_assert!(!before.state.is_terminal(), "terminal state accepted {e:?}");
                }
                Err(_) => prop_assert_eq!(&t, &before, "failed apply mutated the task"),
            }
            if let Err(msg) = legal(&t) {
                prop_assert!(false, "{} after {:?}", msg, e);
            }
        }
    }

    #[test]
    fn json_round_trip_preserves_tasks(cfg in configs(), evs in prop::collection::vec(events(), 0..30)) {
        let mut t = LabelTask::new("t1", "snap", 640, 480, "", 25, cfg, 0.0);
        for e in &evs {
            let _ = t.apply(e);
        }
        let back: LabelTask = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        prop_assert_eq!(back, t);
    }
}
