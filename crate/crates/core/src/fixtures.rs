//! Synthetic pipelines shared by tests, benchmarks and the CLI examples.
//!
//! Fixture actors are small shell commands, so they run unchanged on the
//! local adaptor and produce deterministic bytes.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::artifact::{ArtifactLocator, ArtifactStore};
use crate::catalog::{Catalog, Header, ImageRecord, StudySet};
use crate::enactor::EnactContext;
use crate::glue::{FaultSpec, Glue, LocalAdaptor, SimGridAdaptor, SimGridConfig};
use crate::pipeline::{parse_pipeline, Actor, Edge, Pipeline, PortRef, Task};
use crate::planner::{self, ExecutionPlan, GridView, SiteDescriptor};
use crate::provenance::{Clock, EventBody, NewEvent, ProvError, ProvenanceStore};

/// Four tasks `a -> {b, c} -> d`; `a.src` is study-fed.
pub const DIAMOND: &str = r#"{
  "id": "diamond",
  "name": "Diamond",
  "actors": {
    "prep": {"version": "1", "command": "sh -c 'cat {in:src} > {out:out}; echo prep >> {out:out}'",
             "inputs": ["src"], "outputs": ["out"]},
    "upper": {"version": "1", "command": "sh -c 'tr a-z A-Z < {in:in} > {out:out}'",
              "inputs": ["in"], "outputs": ["out"]},
    "rsort": {"version": "1", "command": "sh -c 'sort -r {in:in} > {out:out}'",
              "inputs": ["in"], "outputs": ["out"]},
    "join": {"version": "1", "command": "sh -c 'cat {in:left} {in:right} > {out:out}'",
             "inputs": ["left", "right"], "outputs": ["out"]}
  },
  "tasks": {
    "a": {"actor": "prep", "version": "1"},
    "b": {"actor": "upper", "version": "1"},
    "c": {"actor": "rsort", "version": "1"},
    "d": {"actor": "join", "version": "1"}
  },
  "edges": [
    {"from": "a.out", "to": "b.in"},
    {"from": "a.out", "to": "c.in"},
    {"from": "b.out", "to": "d.left"},
    {"from": "c.out", "to": "d.right"}
  ],
  "study_inputs": ["a.src"]
}"#;

/// One study-fed task.
pub const SINGLE_STUDY_TASK: &str = r#"{
  "id": "single",
  "actors": {
    "stamp": {"version": "1", "command": "sh -c 'cat {in:img} > {out:out}; echo stamped >> {out:out}'",
              "inputs": ["img"], "outputs": ["out"]}
  },
  "tasks": {"s": {"actor": "stamp", "version": "1"}},
  "study_inputs": ["s.img"]
}"#;

/// Per-image map step followed by a gathering reduce step.
pub const MAP_REDUCE: &str = r#"{
  "id": "mapreduce",
  "actors": {
    "stamp": {"version": "1", "command": "sh -c 'cat {in:img} > {out:out}; echo stamped >> {out:out}'",
              "inputs": ["img"], "outputs": ["out"]},
    "merge": {"version": "1", "command": "sh -c 'cat {in:parts} > {out:out}'",
              "inputs": ["parts"], "outputs": ["out"]}
  },
  "tasks": {
    "m": {"actor": "stamp", "version": "1"},
    "r": {"actor": "merge", "version": "1", "gather": ["parts"]}
  },
  "edges": [{"from": "m.out", "to": "r.parts"}],
  "study_inputs": ["m.img"]
}"#;

/// Two tasks feeding each other; parses but fails validation.
pub const CYCLE: &str = r#"{
  "id": "cycle",
  "actors": {
    "copy": {"version": "1", "command": "cp {in:in} {out:out}", "inputs": ["in"], "outputs": ["out"]}
  },
  "tasks": {
    "x": {"actor": "copy", "version": "1"},
    "y": {"actor": "copy", "version": "1"}
  },
  "edges": [{"from": "x.out", "to": "y.in"}, {"from": "y.out", "to": "x.in"}]
}"#;

/// The diamond with `c` on an actor no fixture grid installs.
pub fn diamond_uninstalled() -> String {
    DIAMOND
        .replace(
            r#""c": {"actor": "rsort", "version": "1"}"#,
            r#""c": {"actor": "rsort", "version": "2"}"#,
        )
        .replace(r#""rsort": {"version": "1""#, r#""rsort": {"version": "2""#)
}

pub fn diamond() -> Pipeline {
    parse_pipeline(DIAMOND).expect("diamond fixture parses")
}

pub fn single_study_task() -> Pipeline {
    parse_pipeline(SINGLE_STUDY_TASK).expect("single-task fixture parses")
}

pub fn map_reduce() -> Pipeline {
    parse_pipeline(MAP_REDUCE).expect("map-reduce fixture parses")
}

/// Two sites that each have every diamond actor installed.
pub fn diamond_grid() -> GridView {
    let actors: Vec<_> = [
        "prep@1", "upper@1", "rsort@1", "join@1", "stamp@1", "merge@1",
    ]
    .iter()
    .map(|a| a.parse().unwrap())
    .collect();
    GridView {
        sites: ["S1", "S2"]
            .iter()
            .map(|id| SiteDescriptor {
                site_id: id.to_string(),
                installed_actors: actors.iter().cloned().collect(),
                slots: 2,
                cost_hint: 1.0,
            })
            .collect(),
    }
}

/// A pipeline over tasks `t0..t{n-1}` with the given task-level edges.
///
/// Task `ti` runs actor `a{i}@1`, which has one output `out` and one input per
/// incoming edge (`in0`, `in1`, ...). Tasks without incoming edges get a single
/// literal-bound input, so every generated pipeline validates when the edges
/// are acyclic and deduplicated.
pub fn dag_pipeline(n: usize, edges: &[(usize, usize)]) -> Pipeline {
    let mut indeg = vec![0usize; n];
    let mut pipeline_edges = Vec::new();
    for &(u, v) in edges {
        pipeline_edges.push(Edge::new(
            PortRef::new(format!("t{u}"), "out"),
            PortRef::new(format!("t{v}"), format!("in{}", indeg[v])),
        ));
        indeg[v] += 1;
    }
    let mut actors = Vec::with_capacity(n);
    let mut tasks = Vec::with_capacity(n);
    for (i, &deg) in indeg.iter().enumerate() {
        let inputs: Vec<String> = (0..deg.max(1)).map(|k| format!("in{k}")).collect();
        let placeholders: Vec<String> = inputs.iter().map(|p| format!("{{in:{p}}}")).collect();
        actors.push(Actor {
            name: format!("a{i}"),
            version: "1".into(),
            command: format!("sh -c 'cat {} > {{out:out}}'", placeholders.join(" ")),
            inputs,
            outputs: vec!["out".into()],
            params: vec![],
        });
        let mut task = Task::new(format!("t{i}"), format!("a{i}@1").parse().unwrap());
        if deg == 0 {
            task.params.insert("in0".into(), "/dev/null".into());
        }
        tasks.push(task);
    }
    Pipeline {
        id: format!("dag{n}"),
        name: format!("random dag over {n} tasks"),
        actors,
        tasks,
        edges: pipeline_edges,
        study_inputs: vec![],
    }
}

/// Header of the `i`-th synthetic image.
pub fn image_header(i: usize) -> Header {
    let mut h = Header::new();
    h.insert("PatientName".into(), format!("Patient {i}"));
    h.insert("PatientID".into(), format!("P{i}"));
    h.insert(
        "StudyDate".into(),
        format!("2021{:02}{:02}", 1 + i % 12, 1 + i % 28),
    );
    h.insert(
        "Modality".into(),
        if i % 3 == 2 { "CT" } else { "MR" }.into(),
    );
    h.insert("Age".into(), (60 + i % 30).to_string());
    h
}

/// Stores, catalog and glue rooted in one directory: the shared state a
/// CLI invocation or gateway instance works against.
pub struct Workspace {
    pub root: PathBuf,
    pub ctx: EnactContext,
    pub sim: Arc<SimGridAdaptor>,
}

impl Workspace {
    /// Registers a `local` backend and an auto-advancing `simgrid` backend over
    /// [`diamond_grid`] with the given fault plan.
    pub fn create(root: &Path, clock: Clock, fault_plan: Vec<FaultSpec>) -> Self {
        let store = ArtifactStore::open(root.join("artifacts")).expect("artifact store");
        let catalog = Catalog::open(root.join("catalog.jsonl")).expect("catalog");
        let prov =
            ProvenanceStore::open(root.join("provenance.jsonl"), clock).expect("provenance log");
        let glue = Glue::new();
        let local = LocalAdaptor::new(store.clone(), root.join("work"), 4).expect("local adaptor");
        glue.register_adaptor("local", Arc::new(local))
            .expect("fresh registry");
        let sim = Arc::new(SimGridAdaptor::new(
            store.clone(),
            SimGridConfig {
                grid: diamond_grid(),
                actor_runtimes: Default::default(),
                fault_plan,
            },
            true,
        ));
        glue.register_adaptor("simgrid", sim.clone())
            .expect("fresh registry");
        Workspace {
            root: root.to_path_buf(),
            ctx: EnactContext {
                glue: Arc::new(glue),
                prov: Arc::new(prov),
                catalog: Arc::new(catalog),
                store,
            },
            sim,
        }
    }

    /// Adds images `first..first+n` with payloads in the artifact store and
    /// returns their ids.
    pub fn add_images(&self, first: usize, n: usize) -> Vec<String> {
        let records: Vec<ImageRecord> = (first..first + n)
            .map(|i| {
                let payload = self
                    .ctx
                    .store
                    .put_bytes(format!("scan {i}\nvoxels {}\n", i * 7919 % 1000).as_bytes())
                    .expect("payload stored");
                ImageRecord {
                    image_id: format!("img-{i:03}"),
                    subject_id: format!("subj-{i:03}"),
                    header: image_header(i),
                    payload_ref: ArtifactLocator::Store(payload),
                }
            })
            .collect();
        self.ctx
            .catalog
            .insert_all(&records)
            .expect("fresh image ids");
        records.into_iter().map(|r| r.image_id).collect()
    }

    /// Records a study set over `members`.
    pub fn study_set(&self, members: Vec<String>) -> StudySet {
        let ev = self
            .ctx
            .prov
            .record_with(|seq, at| {
                Ok::<_, ProvError>(NewEvent::global(EventBody::StudysetCreated {
                    set: StudySet {
                        set_id: format!("ss-{seq:06}"),
                        owner: "fixture".into(),
                        members,
                        created_at: at,
                        defining_query: None,
                    },
                }))
            })
            .expect("study set recorded");
        match ev.body {
            EventBody::StudysetCreated { set } => set,
            _ => unreachable!(),
        }
    }

    /// Plans `p` over a fresh `n`-image study set on [`diamond_grid`].
    pub fn plan_over(&self, p: &Pipeline, n: usize) -> ExecutionPlan {
        let first = self.ctx.catalog.snapshot().expect("catalog").len();
        let members = self.add_images(first, n);
        let set = self.study_set(members);
        planner::plan(p, Some(&set), &diamond_grid()).expect("fixture plans")
    }
}
