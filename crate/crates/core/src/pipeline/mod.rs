//! The abstract pipeline language: actors, tasks, port-to-port edges and the
//! ports that receive study-set members.

mod document;
pub mod template;
mod validate;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use document::{parse_pipeline, serialize_pipeline, ParseError};
pub use validate::{validate, Issue, IssueCode, ValidationReport};

/// Exact (name, version) reference to an installed executable.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ActorRef {
    pub name: String,
    pub version: String,
}

impl ActorRef {
    pub fn new(name: impl Into<String>, version: impl Into<String>) -> Self {
        ActorRef {
            name: name.into(),
            version: version.into(),
        }
    }
}

#[derive(Debug, Error)]
#[error("actor reference `{0}` is not of the form name@version")]
pub struct ActorRefError(String);

impl FromStr for ActorRef {
    type Err = ActorRefError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('@') {
            Some((n, v)) if !n.is_empty() && !v.is_empty() => Ok(ActorRef::new(n, v)),
            _ => Err(ActorRefError(s.to_string())),
        }
    }
}

impl TryFrom<String> for ActorRef {
    type Error = ActorRefError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ActorRef> for String {
    fn from(a: ActorRef) -> String {
        a.to_string()
    }
}

impl fmt::Display for ActorRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.name, self.version)
    }
}

/// One executable task definition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Actor {
    pub name: String,
    pub version: String,
    /// Command line with `{in:PORT}`, `{out:PORT}` and `{param:NAME}` placeholders.
    pub command: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub params: Vec<String>,
}

impl Actor {
    pub fn reference(&self) -> ActorRef {
        ActorRef::new(&self.name, &self.version)
    }

    pub fn has_input(&self, port: &str) -> bool {
        self.inputs.iter().any(|p| p == port)
    }

    pub fn has_output(&self, port: &str) -> bool {
        self.outputs.iter().any(|p| p == port)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Task {
    pub id: String,
    pub actor: ActorRef,
    /// Literal bindings for actor parameters and literal-fed input ports.
    pub params: BTreeMap<String, String>,
    /// Output ports whose artifacts are retained even when consumed downstream.
    pub persist: Vec<String>,
    /// Input ports that collect every fanned-out artifact of their producer
    /// as a list instead of inheriting the producer's fan-out.
    pub gather: Vec<String>,
}

impl Task {
    pub fn new(id: impl Into<String>, actor: ActorRef) -> Self {
        Task {
            id: id.into(),
            actor,
            params: BTreeMap::new(),
            persist: Vec::new(),
            gather: Vec::new(),
        }
    }
}

/// A `task.port` endpoint.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PortRef {
    pub task: String,
    pub port: String,
}

impl PortRef {
    pub fn new(task: impl Into<String>, port: impl Into<String>) -> Self {
        PortRef {
            task: task.into(),
            port: port.into(),
        }
    }
}

impl FromStr for PortRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.rsplit_once('.') {
            Some((t, p)) if !t.is_empty() && !p.is_empty() => Ok(PortRef::new(t, p)),
            _ => Err(format!("`{s}` is not of the form task.port")),
        }
    }
}

impl fmt::Display for PortRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.task, self.port)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Edge {
    pub from: PortRef,
    pub to: PortRef,
}

impl Edge {
    pub fn new(from: PortRef, to: PortRef) -> Self {
        Edge { from, to }
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from, self.to)
    }
}

/// An abstract pipeline. Serializes to and from the JSON pipeline document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "document::PipelineDoc", into = "document::PipelineDoc")]
pub struct Pipeline {
    pub id: String,
    pub name: String,
    pub actors: Vec<Actor>,
    pub tasks: Vec<Task>,
    pub edges: Vec<Edge>,
    pub study_inputs: Vec<PortRef>,
}

impl Pipeline {
    pub fn task(&self, id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn actor(&self, r: &ActorRef) -> Option<&Actor> {
        self.actors
            .iter()
            .find(|a| a.name == r.name && a.version == r.version)
    }

    pub fn actor_of(&self, task_id: &str) -> Option<&Actor> {
        self.task(task_id).and_then(|t| self.actor(&t.actor))
    }

    /// Distinct task ids, sorted.
    pub fn task_ids(&self) -> BTreeSet<&str> {
        self.tasks.iter().map(|t| t.id.as_str()).collect()
    }

    /// Deduplicated task-level successor sets (port detail dropped).
    pub fn successors(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut succ: BTreeMap<&str, BTreeSet<&str>> = self
            .tasks
            .iter()
            .map(|t| (t.id.as_str(), BTreeSet::new()))
            .collect();
        for e in &self.edges {
            succ.entry(e.from.task.as_str())
                .or_default()
                .insert(e.to.task.as_str());
            succ.entry(e.to.task.as_str()).or_default();
        }
        succ
    }

    /// Kahn topological order with lexicographic tie-breaking; `None` on a cycle.
    pub fn topological_order(&self) -> Option<Vec<String>> {
        let succ = self.successors();
        let mut indegree: BTreeMap<&str, usize> = succ.keys().map(|k| (*k, 0)).collect();
        for targets in succ.values() {
            for t in targets {
                *indegree.get_mut(t).unwrap() += 1;
            }
        }
        let mut ready: BTreeSet<&str> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(k, _)| *k)
            .collect();
        let mut order = Vec::with_capacity(succ.len());
        while let Some(n) = ready.pop_first() {
            order.push(n.to_string());
            for m in &succ[n] {
                let d = indegree.get_mut(m).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.insert(m);
                }
            }
        }
        (order.len() == succ.len()).then_some(order)
    }

    /// Edges feeding `task`, in document order.
    pub fn edges_into<'a>(&'a self, task: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.to.task == task)
    }

    pub fn is_study_fed(&self, port: &PortRef) -> bool {
        self.study_inputs.contains(port)
    }
}

/// The distinct actor references used by tasks; the set a site must cover to
/// run the whole pipeline.
pub fn required_actors(p: &Pipeline) -> BTreeSet<ActorRef> {
    p.tasks.iter().map(|t| t.actor.clone()).collect()
}

/// True when `name` matches `[a-z][a-z0-9_-]{0,63}`.
pub fn is_valid_name(name: &str) -> bool {
    let bytes = name.as_bytes();
    !bytes.is_empty()
        && bytes.len() <= 64
        && bytes[0].is_ascii_lowercase()
        && bytes[1..]
            .iter()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || *b == b'_' || *b == b'-')
}
