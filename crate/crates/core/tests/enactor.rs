use std::collections::{BTreeMap, BTreeSet};

use medpipe_core::enactor::{EnactError, EnactOptions, Enactor, ExecStatus};
use medpipe_core::fixtures::{self, Workspace};
use medpipe_core::glue::{FaultSpec, JobState};
use medpipe_core::provenance::{
    Clock, EventBody, EventFilter, EventKind, ProvenanceEvent, ProvenanceStore,
};

fn opts(backend: &str, retry_limit: u32) -> EnactOptions {
    EnactOptions {
        backend: backend.into(),
        retry_limit,
    }
}

fn fault(task: &str, attempts: &[u32]) -> Vec<FaultSpec> {
    attempts
        .iter()
        .map(|a| FaultSpec {
            task: task.into(),
            attempt: *a,
        })
        .collect()
}

/// (task, study index) -> attempts recorded for one execution.
fn attempts(prov: &ProvenanceStore, exec: &str) -> BTreeMap<(String, Option<u32>), BTreeSet<u32>> {
    let mut out: BTreeMap<_, BTreeSet<u32>> = BTreeMap::new();
    for e in prov
        .query_events(&EventFilter {
            execution_id: Some(exec.into()),
            kind: Some(EventKind::TaskTransition),
            ..Default::default()
        })
        .unwrap()
    {
        if let EventBody::TaskTransition(t) = e.body {
            out.entry((t.task_id, t.study_index))
                .or_default()
                .insert(t.attempt);
        }
    }
    out
}

fn done_seq(events: &[ProvenanceEvent], task: &str) -> u64 {
    events
        .iter()
        .find_map(|e| match &e.body {
            EventBody::TaskTransition(t) if t.task_id == task && t.to == JobState::Done => {
                Some(e.seq)
            }
            _ => None,
        })
        .unwrap_or_else(|| panic!("{task} never finished"))
}

fn first_seq(events: &[ProvenanceEvent], task: &str) -> u64 {
    events
        .iter()
        .find(|e| e.body.task_id() == Some(task))
        .map(|e| e.seq)
        .unwrap_or_else(|| panic!("{task} never started"))
}

#[test]
fn diamond_happy_path_on_both_backends() {
    for backend in ["local", "simgrid"] {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::create(dir.path(), Clock::Logical, vec![]);
        let p = fixtures::diamond();
        let plan = ws.plan_over(&p, 1);
        let result = Enactor::new()
            .enact(&ws.ctx, &plan, &p, &opts(backend, 1), &mut |_| {})
            .unwrap();
        assert_eq!(result.status, ExecStatus::Succeeded);
        let out = result.output("d", "out", Some(0)).expect("d produced");
        assert!(ws.ctx.store.contains(out));

        let events = ws.ctx.prov.snapshot().unwrap().events().to_vec();
        let a = done_seq(&events, "a");
        for t in ["b", "c"] {
            assert!(first_seq(&events, t) > a);
            assert!(first_seq(&events, "d") > done_seq(&events, t));
        }
        assert!(ws
            .ctx
            .prov
            .unverified_artifacts(&ws.ctx.store)
            .unwrap()
            .is_empty());

        let lineage = ws.ctx.prov.lineage(out).unwrap();
        let tasks: BTreeSet<&str> = lineage.tasks().map(|(t, _)| t).collect();
        assert_eq!(tasks, BTreeSet::from(["a", "b", "c", "d"]));
        // a.out, b.out, c.out, d.out and the study image
        assert_eq!(lineage.artifacts().count(), 5, "{backend}");
    }
}

#[test]
fn local_diamond_outputs_match_expected_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::create(dir.path(), Clock::Logical, vec![]);
    let p = fixtures::diamond();
    let plan = ws.plan_over(&p, 1);
    let r = Enactor::new()
        .enact(&ws.ctx, &plan, &p, &opts("local", 1), &mut |_| {})
        .unwrap();
    let d = ws
        .ctx
        .store
        .read(r.output("d", "out", Some(0)).unwrap())
        .unwrap();
    // image 0 payload is "scan 0\nvoxels 0\n"; a appends "prep"; b uppercases;
    // c reverse-sorts; d concatenates b then c.
    assert_eq!(
        String::from_utf8(d).unwrap(),
        "SCAN 0\nVOXELS 0\nPREP\nvoxels 0\nscan 0\nprep\n"
    );
}

#[test]
fn transient_fault_is_retried_once() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::create(dir.path(), Clock::Logical, fault("b", &[1]));
    let p = fixtures::diamond();
    let plan = ws.plan_over(&p, 1);
    let r = Enactor::new()
        .enact(&ws.ctx, &plan, &p, &opts("simgrid", 1), &mut |_| {})
        .unwrap();
    assert_eq!(r.status, ExecStatus::Succeeded);
    let counts = attempts(&ws.ctx.prov, &r.execution_id);
    for t in ["a", "c", "d"] {
        assert_eq!(counts[&(t.to_string(), Some(0))], BTreeSet::from([1]));
    }
    assert_eq!(counts[&("b".to_string(), Some(0))], BTreeSet::from([1, 2]));
    let b_transitions = ws
        .ctx
        .prov
        .query_events(&EventFilter {
            kind: Some(EventKind::TaskTransition),
            task_id: Some("b".into()),
            ..Default::default()
        })
        .unwrap();
    // PENDING STAGING RUNNING FAILED, then PENDING STAGING RUNNING DONE
    assert_eq!(b_transitions.len(), 8);
}

#[test]
fn permanent_fault_stops_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::create(dir.path(), Clock::Logical, fault("b", &[1, 2]));
    let p = fixtures::diamond();
    let plan = ws.plan_over(&p, 1);
    let err = Enactor::new()
        .enact(&ws.ctx, &plan, &p, &opts("simgrid", 1), &mut |_| {})
        .unwrap_err();
    let EnactError::EnactmentFailed {
        task_id, result, ..
    } = &err
    else {
        panic!("unexpected {err}");
    };
    assert_eq!(task_id, "b");
    assert_eq!(result.status, ExecStatus::Failed);
    let a_out = result.output("a", "out", Some(0)).unwrap();
    assert!(ws.ctx.store.contains(a_out));
    let counts = attempts(&ws.ctx.prov, &result.execution_id);
    assert_eq!(counts[&("b".to_string(), Some(0))].len(), 2);
    assert!(!counts.contains_key(&("d".to_string(), Some(0))));
    assert!(ws
        .ctx
        .prov
        .unverified_artifacts(&ws.ctx.store)
        .unwrap()
        .is_empty());
    let summary = ws
        .ctx
        .prov
        .read(|s| s.execution(&result.execution_id))
        .unwrap()
        .unwrap();
    assert!(summary.attempts.iter().all(|a| a.state.is_terminal()));
}

#[test]
fn zero_retries_fail_on_first_fault() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::create(dir.path(), Clock::Logical, fault("b", &[1]));
    let p = fixtures::diamond();
    let plan = ws.plan_over(&p, 1);
    let err = Enactor::new()
        .enact(&ws.ctx, &plan, &p, &opts("simgrid", 0), &mut |_| {})
        .unwrap_err();
    let r = err.result().unwrap();
    assert_eq!(
        attempts(&ws.ctx.prov, &r.execution_id)[&("b".to_string(), Some(0))].len(),
        1
    );
}

#[test]
fn cancel_before_second_stage() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::create(dir.path(), Clock::Logical, vec![]);
    let p = fixtures::diamond();
    let plan = ws.plan_over(&p, 1);
    let enactor = Enactor::new();
    let exec = enactor
        .begin(&ws.ctx, &plan, &p, &opts("simgrid", 1))
        .unwrap();
    let id = exec.id().to_string();
    let handle = enactor.clone();
    let err = exec
        .run(&mut |e| {
            if let EventBody::ArtifactCreated { artifact, .. } = &e.body {
                if artifact.classification == medpipe_core::provenance::Classification::Transitory {
                    handle.cancel_execution(&id).unwrap();
                }
            }
        })
        .unwrap_err();
    let EnactError::Canceled { result } = err else {
        panic!()
    };
    assert_eq!(result.status, ExecStatus::Canceled);
    let counts = attempts(&ws.ctx.prov, &result.execution_id);
    assert_eq!(counts.len(), 1, "only a ran: {counts:?}");
    assert!(matches!(
        enactor.cancel_execution(&result.execution_id),
        Err(EnactError::UnknownExecution(_))
    ));
}

#[test]
fn cancel_mid_stage_leaves_nothing_running() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::create(dir.path(), Clock::Logical, vec![]);
    let p = fixtures::map_reduce();
    let plan = ws.plan_over(&p, 6);
    let enactor = Enactor::new();
    let exec = enactor
        .begin(&ws.ctx, &plan, &p, &opts("local", 1))
        .unwrap();
    let id = exec.id().to_string();
    let handle = enactor.clone();
    let mut fired = false;
    let err = exec
        .run(&mut |e| {
            if let EventBody::TaskTransition(t) = &e.body {
                if t.to == JobState::Pending && !fired {
                    fired = true;
                    handle.cancel_execution(&id).unwrap();
                }
            }
        })
        .unwrap_err();
    let r = err.result().unwrap();
    assert_eq!(r.status, ExecStatus::Canceled);
    let summary = ws
        .ctx
        .prov
        .read(|s| s.execution(&r.execution_id))
        .unwrap()
        .unwrap();
    assert!(!summary.attempts.is_empty());
    assert!(summary.attempts.iter().all(|a| a.state.is_terminal()));
    assert!(summary.attempts.iter().all(|a| a.task_id == "m"));
}

#[test]
fn completed_execution_is_not_cancelable() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::create(dir.path(), Clock::Logical, vec![]);
    let p = fixtures::single_study_task();
    let plan = ws.plan_over(&p, 1);
    let enactor = Enactor::new();
    let r = enactor
        .enact(&ws.ctx, &plan, &p, &opts("simgrid", 1), &mut |_| {})
        .unwrap();
    assert!(matches!(
        enactor.cancel_execution(&r.execution_id),
        Err(EnactError::UnknownExecution(_))
    ));
}

#[test]
fn fan_out_cardinality() {
    for n in [1usize, 3, 7] {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::create(dir.path(), Clock::Logical, vec![]);
        let p = fixtures::single_study_task();
        let plan = ws.plan_over(&p, n);
        let members = &plan.study_fanout["s.img"];
        let r = Enactor::new()
            .enact(&ws.ctx, &plan, &p, &opts("local", 1), &mut |_| {})
            .unwrap();
        assert_eq!(r.outputs.len(), n);
        let snapshot = ws.ctx.catalog.snapshot().unwrap();
        for (i, o) in r.outputs.iter().enumerate() {
            assert_eq!(o.study_index, Some(i as u32));
            let lineage = ws.ctx.prov.lineage(&o.artifact_id).unwrap();
            let image = snapshot.get(&members[i]).unwrap();
            let payload = image.payload_ref.store_id().unwrap().to_string();
            assert!(
                lineage.artifacts().any(|a| a == payload),
                "index {i} traces to its own image"
            );
            assert_eq!(
                lineage.tasks().collect::<Vec<_>>(),
                vec![("s", Some(i as u32))]
            );
        }
    }
}

#[test]
fn gather_port_collects_every_member() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::create(dir.path(), Clock::Logical, vec![]);
    let p = fixtures::map_reduce();
    let plan = ws.plan_over(&p, 3);
    let r = Enactor::new()
        .enact(&ws.ctx, &plan, &p, &opts("local", 1), &mut |_| {})
        .unwrap();
    assert_eq!(r.outputs.iter().filter(|o| o.task_id == "m").count(), 3);
    let merged = r.output("r", "out", None).unwrap();
    let text = String::from_utf8(ws.ctx.store.read(merged).unwrap()).unwrap();
    assert_eq!(text.matches("stamped").count(), 3);
    let lineage = ws.ctx.prov.lineage(merged).unwrap();
    assert_eq!(lineage.tasks().count(), 4);
}

#[test]
fn execution_ids_follow_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::create(dir.path(), Clock::Logical, vec![]);
    let p = fixtures::single_study_task();
    let plan = ws.plan_over(&p, 1);
    let enactor = Enactor::new();
    let exec = enactor
        .begin(&ws.ctx, &plan, &p, &opts("simgrid", 1))
        .unwrap();
    let seq = ws.ctx.prov.snapshot().unwrap().last_seq();
    assert_eq!(exec.id(), format!("exec-{seq:06}"));
    assert!(enactor.is_live(exec.id()));
    drop(exec);
    let bad = opts("glite", 1);
    assert!(matches!(
        enactor.begin(&ws.ctx, &plan, &p, &bad),
        Err(EnactError::UnknownBackend(_))
    ));
}
