use std::sync::Arc;

use medpipe_core::artifact::ArtifactStore;
use medpipe_core::catalog::StudySet;
use medpipe_core::enactor::{ExecStatus, ExecutionResult};
use medpipe_core::fixtures;
use medpipe_core::glue::JobState;
use medpipe_core::planner;
use medpipe_core::provenance::{
    ArtifactRecord, Classification, Clock, EventBody, EventFilter, EventKind, NewEvent, ProducedBy,
    ProvError, ProvenanceStore, StoreState, TaskTransition,
};
use proptest::prelude::*;

fn plan_event() -> (String, NewEvent) {
    let p = fixtures::diamond();
    let set = StudySet {
        set_id: "ss-1".into(),
        owner: "alice".into(),
        members: vec!["i1".into(), "i2".into()],
        created_at: chrono::DateTime::UNIX_EPOCH,
        defining_query: None,
    };
    let plan = planner::plan(&p, Some(&set), &fixtures::diamond_grid()).unwrap();
    let id = plan.plan_id.clone();
    (
        id,
        NewEvent::global(EventBody::PlanCreated { plan, pipeline: p }),
    )
}

fn start(prov: &ProvenanceStore) -> String {
    let (plan_id, ev) = plan_event();
    if prov.read(|s| s.plan(&plan_id).is_none()).unwrap() {
        prov.record(ev).unwrap();
    }
    let e = prov
        .record_with(|seq, _| {
            Ok::<_, ProvError>(NewEvent::for_execution(
                format!("exec-{seq:06}"),
                EventBody::ExecStarted {
                    plan_id: plan_id.clone(),
                    pipeline_id: "diamond".into(),
                    backend: "simgrid".into(),
                    retry_limit: 1,
                },
            ))
        })
        .unwrap();
    e.execution_id.unwrap()
}

fn transition(
    exec: &str,
    task: &str,
    attempt: u32,
    from: Option<JobState>,
    to: JobState,
) -> NewEvent {
    NewEvent::for_execution(
        exec,
        EventBody::TaskTransition(TaskTransition {
            task_id: task.into(),
            study_index: None,
            attempt,
            from,
            to,
            site_id: "S1".into(),
            exit_code: None,
            diagnostics: String::new(),
        }),
    )
}

fn run_attempt(prov: &ProvenanceStore, exec: &str, task: &str, attempt: u32, last: JobState) {
    use JobState::*;
    let mut from = None;
    for to in [Pending, Staging, Running, last] {
        prov.record(transition(exec, task, attempt, from, to))
            .unwrap();
        from = Some(to);
    }
}

fn end(prov: &ProvenanceStore, exec: &str, status: ExecStatus) {
    let (plan_id, _) = plan_event();
    prov.record(NewEvent::for_execution(
        exec,
        EventBody::ExecEnded {
            result: ExecutionResult {
                execution_id: exec.into(),
                plan_id,
                status,
                outputs: vec![],
                failure: None,
            },
        },
    ))
    .unwrap();
}

#[test]
fn first_event_gets_seq_one() {
    let prov = ProvenanceStore::in_memory(Clock::Logical);
    let (_, ev) = plan_event();
    assert_eq!(prov.record(ev).unwrap(), 1);
}

#[test]
fn done_to_running_is_illegal() {
    let prov = ProvenanceStore::in_memory(Clock::Logical);
    let exec = start(&prov);
    run_attempt(&prov, &exec, "a", 1, JobState::Done);
    let err = prov
        .record(transition(
            &exec,
            "a",
            1,
            Some(JobState::Done),
            JobState::Running,
        ))
        .unwrap_err();
    assert!(matches!(err, ProvError::IllegalTransition { .. }), "{err}");
    // a stale `from` is also rejected
    let err = prov
        .record(transition(
            &exec,
            "a",
            1,
            Some(JobState::Running),
            JobState::Failed,
        ))
        .unwrap_err();
    assert!(matches!(err, ProvError::IllegalTransition { .. }));
}

#[test]
fn attempts_are_consecutive_and_sequential() {
    let prov = ProvenanceStore::in_memory(Clock::Logical);
    let exec = start(&prov);
    prov.record(transition(&exec, "b", 1, None, JobState::Pending))
        .unwrap();
    let err = prov
        .record(transition(&exec, "b", 2, None, JobState::Pending))
        .unwrap_err();
    assert!(matches!(err, ProvError::InvalidEvent(_)));
    let err = prov
        .record(transition(&exec, "c", 2, None, JobState::Pending))
        .unwrap_err();
    assert!(matches!(err, ProvError::InvalidEvent(_)));
    // an execution cannot end with b still pending
    let (plan_id, _) = plan_event();
    let err = prov
        .record(NewEvent::for_execution(
            &exec,
            EventBody::ExecEnded {
                result: ExecutionResult {
                    execution_id: exec.clone(),
                    plan_id,
                    status: ExecStatus::Failed,
                    outputs: vec![],
                    failure: None,
                },
            },
        ))
        .unwrap_err();
    assert!(matches!(err, ProvError::InvalidEvent(_)));
}

#[test]
fn racing_records_get_consecutive_seqs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prov.jsonl");
    let a = Arc::new(ProvenanceStore::open(&path, Clock::System).unwrap());
    let b = Arc::new(ProvenanceStore::open(&path, Clock::System).unwrap());
    let store = ArtifactStore::open(dir.path().join("artifacts")).unwrap();
    let ids: Vec<_> = (0..40)
        .map(|i| store.put_bytes(format!("{i}").as_bytes()).unwrap())
        .collect();
    let threads: Vec<_> = ids
        .chunks(10)
        .enumerate()
        .map(|(t, chunk)| {
            let prov = if t % 2 == 0 { a.clone() } else { b.clone() };
            let store = store.clone();
            let chunk = chunk.to_vec();
            std::thread::spawn(move || {
                chunk
                    .iter()
                    .map(|id| {
                        prov.import_external(&store, id).unwrap();
                        prov.read(|s| s.last_seq()).unwrap()
                    })
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    let seqs: Vec<u64> = a
        .snapshot()
        .unwrap()
        .events()
        .iter()
        .map(|e| e.seq)
        .collect();
    assert_eq!(seqs, (1..=40).collect::<Vec<_>>());
    assert_eq!(a.snapshot().unwrap(), b.snapshot().unwrap());
    assert_eq!(
        ProvenanceStore::replay_file(&path).unwrap(),
        a.snapshot().unwrap()
    );
    assert!(a.unverified_artifacts(&store).unwrap().is_empty());
}

#[test]
fn replay_rebuilds_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prov.jsonl");
    let prov = ProvenanceStore::open(&path, Clock::System).unwrap();
    let e1 = start(&prov);
    run_attempt(&prov, &e1, "a", 1, JobState::Failed);
    run_attempt(&prov, &e1, "a", 2, JobState::Done);
    end(&prov, &e1, ExecStatus::Succeeded);
    let e2 = start(&prov);
    end(&prov, &e2, ExecStatus::Canceled);

    let live = prov.snapshot().unwrap();
    assert_eq!(ProvenanceStore::replay_file(&path).unwrap(), live);
    assert_eq!(StoreState::replay(live.events().to_vec()).unwrap(), live);
    let reopened = ProvenanceStore::open(&path, Clock::System).unwrap();
    assert_eq!(reopened.snapshot().unwrap(), live);

    let summary = live.execution(&e1).unwrap();
    assert_eq!(summary.attempts.len(), 2);
    let only_e2 = prov
        .query_events(&EventFilter {
            execution_id: Some(e2.clone()),
            ..Default::default()
        })
        .unwrap();
    assert_eq!(
        only_e2.iter().map(|e| e.kind()).collect::<Vec<_>>(),
        vec![EventKind::ExecStarted, EventKind::ExecEnded]
    );
    assert_eq!(
        prov.query_events(&EventFilter::default()).unwrap().len(),
        live.events().len()
    );
}

#[test]
fn corrupt_log_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prov.jsonl");
    std::fs::write(&path, "{\"seq\": 1}\n").unwrap();
    assert!(matches!(
        ProvenanceStore::open(&path, Clock::System),
        Err(ProvError::Corrupt { line: 1, .. })
    ));
}

#[test]
fn lineage_of_external_and_unknown() {
    let dir = tempfile::tempdir().unwrap();
    let store = ArtifactStore::open(dir.path()).unwrap();
    let prov = ProvenanceStore::in_memory(Clock::Logical);
    let id = store.put_bytes(b"scan").unwrap();
    prov.import_external(&store, &id).unwrap();
    let g = prov.lineage(&id).unwrap();
    assert_eq!(g.nodes.len(), 1);
    assert!(g.edges.is_empty());
    let other = store.put_bytes(b"other").unwrap();
    assert!(matches!(
        prov.lineage(&other),
        Err(ProvError::UnknownArtifact(_))
    ));
}

#[test]
fn artifact_inputs_must_be_known() {
    let dir = tempfile::tempdir().unwrap();
    let store = ArtifactStore::open(dir.path()).unwrap();
    let prov = ProvenanceStore::in_memory(Clock::Logical);
    let exec = start(&prov);
    let out = store.put_bytes(b"out").unwrap();
    let unknown = store.put_bytes(b"in").unwrap();
    let err = prov
        .record(NewEvent::for_execution(
            &exec,
            EventBody::ArtifactCreated {
                artifact: ArtifactRecord {
                    artifact_id: out,
                    produced_by: ProducedBy::Task {
                        execution_id: exec.clone(),
                        task_id: "a".into(),
                        port: "out".into(),
                        study_index: None,
                    },
                    classification: Classification::Transitory,
                    size_bytes: 3,
                },
                inputs: vec![unknown],
            },
        ))
        .unwrap_err();
    assert!(matches!(err, ProvError::InvalidEvent(_)));
}

#[test]
fn cache_hits_and_invalidation() {
    let prov = ProvenanceStore::in_memory(Clock::Logical);
    let exec = start(&prov);
    let f = EventFilter {
        kind: Some(EventKind::TaskTransition),
        ..Default::default()
    };
    let first = prov.cached_query(&f).unwrap();
    let second = prov.cached_query(&f).unwrap();
    assert_eq!(first, second);
    assert_eq!(prov.cache_stats().hits, 1);
    assert_eq!(
        serde_json::to_vec(&first).unwrap(),
        serde_json::to_vec(&second).unwrap()
    );

    prov.record(transition(&exec, "a", 1, None, JobState::Pending))
        .unwrap();
    let third = prov.cached_query(&f).unwrap();
    assert_eq!(prov.cache_stats().hits, 1);
    assert_eq!(third.len(), 1);

    // non-matching write: still correct
    let g = EventFilter {
        kind: Some(EventKind::ExecEnded),
        ..Default::default()
    };
    prov.cached_query(&g).unwrap();
    prov.record(transition(
        &exec,
        "a",
        1,
        Some(JobState::Pending),
        JobState::Staging,
    ))
    .unwrap();
    assert_eq!(
        prov.cached_query(&g).unwrap(),
        prov.query_events(&g).unwrap()
    );
    assert_eq!(prov.cache_stats().hits, 2);
}

#[test]
fn cache_sees_writes_from_other_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prov.jsonl");
    let a = ProvenanceStore::open(&path, Clock::System).unwrap();
    let b = ProvenanceStore::open(&path, Clock::System).unwrap();
    let exec = start(&a);
    let f = EventFilter::default();
    let before = a.cached_query(&f).unwrap();
    b.record(transition(&exec, "a", 1, None, JobState::Pending))
        .unwrap();
    let after = a.cached_query(&f).unwrap();
    assert_eq!(after.len(), before.len() + 1);
}

#[test]
fn filter_spec_parsing() {
    let f = EventFilter::parse_spec("task=b, kind=task_transition,exec=exec-000002,from=3,to=9")
        .unwrap();
    assert_eq!(f.task_id.as_deref(), Some("b"));
    assert_eq!(f.kind, Some(EventKind::TaskTransition));
    assert_eq!(f.execution_id.as_deref(), Some("exec-000002"));
    assert_eq!((f.seq_from, f.seq_to), (Some(3), Some(9)));
    assert_eq!(EventFilter::parse_spec("").unwrap(), EventFilter::default());
    assert!(EventFilter::parse_spec("colour=red").is_err());
    assert!(EventFilter::parse_spec("kind=NOPE").is_err());
}

fn filter_strategy() -> impl Strategy<Value = EventFilter> {
    (
        proptest::option::of(0usize..3),
        proptest::option::of(prop_oneof![Just("a"), Just("b"), Just("zz")]),
        proptest::option::of(0usize..EventKind::ALL.len()),
        proptest::option::of(0u64..30),
        proptest::option::of(0u64..30),
    )
        .prop_map(|(exec, task, kind, from, to)| EventFilter {
            execution_id: exec
                .map(|i| ["exec-000002", "exec-000012", "exec-999999"][i].to_string()),
            task_id: task.map(str::to_string),
            kind: kind.map(|k| EventKind::ALL[k]),
            seq_from: from,
            seq_to: to,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cached_query_equals_scan(ops in proptest::collection::vec(prop_oneof![
        3 => filter_strategy().prop_map(Some),
        1 => Just(None),
    ], 1..60)) {
        let prov = ProvenanceStore::in_memory(Clock::Logical);
        let exec = start(&prov);
        let tasks = ["a", "b"];
        let mut cursor = 0usize;
        use JobState::*;
        let script: Vec<(usize, Option<JobState>, JobState)> = tasks
            .iter()
            .enumerate()
            .flat_map(|(i, _)| [(i, None, Pending), (i, Some(Pending), Staging), (i, Some(Staging), Running), (i, Some(Running), Done)])
            .collect();
        for op in ops {
            match op {
                Some(f) => {
                    let cached = prov.cached_query(&f).unwrap();
                    let brute: Vec<_> = prov
                        .snapshot()
                        .unwrap()
                        .events()
                        .iter()
                        .filter(|e| f.matches(e))
                        .cloned()
                        .collect();
                    prop_assert_eq!(&cached, &brute);
                    prop_assert_eq!(cached, prov.query_events(&f).unwrap());
                }
                None if cursor < script.len() => {
                    let (t, from, to) = script[cursor];
                    prov.record(transition(&exec, tasks[t], 1, from, to)).unwrap();
                    cursor += 1;
                }
                None => {}
            }
        }
    }
}
