//! JSON pipeline documents.
//!
//! ```json
//! {
//!   "id": "diamond",
//!   "name": "Diamond",
//!   "actors": {"split": {"version": "1", "command": "split {in:src} {out:a}",
//!                        "inputs": ["src"], "outputs": ["a"]}},
//!   "tasks": {"a": {"actor": "split", "version": "1", "params": {}}},
//!   "edges": [{"from": "a.a", "to": "b.x"}],
//!   "study_inputs": ["a.src"]
//! }
//! ```
//!
//! Object keys in `actors` and `tasks` keep document order and duplicates, so
//! a repeated task id reaches validation instead of being silently dropped.

use std::collections::BTreeMap;
use std::fmt;
use std::marker::PhantomData;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use super::{Actor, ActorRef, Edge, Pipeline, PortRef, Task};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown task `{reference}` referenced by {context}")]
    UnknownTaskRef { reference: String, context: String },
    #[error("task `{task}` references unknown actor `{actor}`")]
    UnknownActorRef { task: String, actor: String },
    #[error("unknown port `{reference}` referenced by {context}")]
    UnknownPortRef { reference: String, context: String },
}

/// Parses and resolves a pipeline document.
pub fn parse_pipeline(doc: &str) -> Result<Pipeline, ParseError> {
    let raw: PipelineDoc =
        serde_json::from_str(doc).map_err(|e| ParseError::Syntax(e.to_string()))?;
    Pipeline::try_from(raw)
}

pub fn serialize_pipeline(p: &Pipeline) -> String {
    serde_json::to_string_pretty(&PipelineDoc::from(p.clone())).expect("pipeline serializes")
}

/// Ordered map entries that tolerate duplicate keys.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Entries<V>(pub Vec<(String, V)>);

impl<V> Default for Entries<V> {
    fn default() -> Self {
        Entries(Vec::new())
    }
}

impl<V: Serialize> Serialize for Entries<V> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de, V: Deserialize<'de>> Deserialize<'de> for Entries<V> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct EntriesVisitor<V>(PhantomData<V>);

        impl<'de, V: Deserialize<'de>> Visitor<'de> for EntriesVisitor<V> {
            type Value = Entries<V>;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, V>()? {
                    out.push((k, v));
                }
                Ok(Entries(out))
            }
        }

        d.deserialize_map(EntriesVisitor(PhantomData))
    }
}

/// A literal parameter value; JSON numbers and booleans are kept as their
/// textual form.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub(crate) struct Literal(pub String);

impl<'de> Deserialize<'de> for Literal {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) => Ok(Literal(s)),
            serde_json::Value::Number(n) => Ok(Literal(n.to_string())),
            serde_json::Value::Bool(b) => Ok(Literal(b.to_string())),
            other => Err(serde::de::Error::custom(format!(
                "parameter values must be scalars, got {other}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ActorDoc {
    version: String,
    command: String,
    #[serde(default)]
    inputs: Vec<String>,
    #[serde(default)]
    outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    params: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct TaskDoc {
    actor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    version: Option<String>,
    #[serde(default)]
    params: BTreeMap<String, Literal>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    persist: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    gather: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct EdgeDoc {
    from: String,
    to: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct PipelineDoc {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    actors: Entries<ActorDoc>,
    tasks: Entries<TaskDoc>,
    #[serde(default)]
    edges: Vec<EdgeDoc>,
    #[serde(default)]
    study_inputs: Vec<String>,
}

impl From<Pipeline> for PipelineDoc {
    fn from(p: Pipeline) -> Self {
        PipelineDoc {
            name: Some(p.name),
            id: p.id,
            actors: Entries(
                p.actors
                    .into_iter()
                    .map(|a| {
                        (
                            a.name,
                            ActorDoc {
                                version: a.version,
                                command: a.command,
                                inputs: a.inputs,
                                outputs: a.outputs,
                                params: a.params,
                            },
                        )
                    })
                    .collect(),
            ),
            tasks: Entries(
                p.tasks
                    .into_iter()
                    .map(|t| {
                        (
                            t.id,
                            TaskDoc {
                                actor: t.actor.name,
                                version: Some(t.actor.version),
                                params: t
                                    .params
                                    .into_iter()
                                    .map(|(k, v)| (k, Literal(v)))
                                    .collect(),
                                persist: t.persist,
                                gather: t.gather,
                            },
                        )
                    })
                    .collect(),
            ),
            edges: p
                .edges
                .iter()
                .map(|e| EdgeDoc {
                    from: e.from.to_string(),
                    to: e.to.to_string(),
                })
                .collect(),
            study_inputs: p.study_inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TryFrom<PipelineDoc> for Pipeline {
    type Error = ParseError;

    fn try_from(doc: PipelineDoc) -> Result<Self, Self::Error> {
        let actors: Vec<Actor> = doc
            .actors
            .0
            .into_iter()
            .map(|(name, a)| Actor {
                name,
                version: a.version,
                command: a.command,
                inputs: a.inputs,
                outputs: a.outputs,
                params: a.params,
            })
            .collect();

        let mut tasks = Vec::with_capacity(doc.tasks.0.len());
        for (id, t) in doc.tasks.0 {
            let actor = match &t.version {
                Some(v) => actors.iter().find(|a| a.name == t.actor && &a.version == v),
                None => actors.iter().find(|a| a.name == t.actor),
            };
            let Some(actor) = actor else {
                return Err(ParseError::UnknownActorRef {
                    task: id,
                    actor: match t.version {
                        Some(v) => format!("{}@{}", t.actor, v),
                        None => t.actor,
                    },
                });
            };
            tasks.push(Task {
                id,
                actor: ActorRef::new(&actor.name, &actor.version),
                params: t.params.into_iter().map(|(k, v)| (k, v.0)).collect(),
                persist: t.persist,
                gather: t.gather,
            });
        }

        let resolve = |raw: &str, context: &str| -> Result<PortRef, ParseError> {
            let port: PortRef = raw.parse().map_err(ParseError::Syntax)?;
            let Some(task) = tasks.iter().find(|t| t.id == port.task) else {
                return Err(ParseError::UnknownTaskRef {
                    reference: port.task,
                    context: context.to_string(),
                });
            };
            let actor = actors
                .iter()
                .find(|a| a.reference() == task.actor)
                .expect("task actors resolved above");
            if !actor.has_input(&port.port) && !actor.has_output(&port.port) {
                return Err(ParseError::UnknownPortRef {
                    reference: raw.to_string(),
                    context: context.to_string(),
                });
            }
            Ok(port)
        };

        let mut edges = Vec::with_capacity(doc.edges.len());
        for e in &doc.edges {
            let ctx = format!("edge {} -> {}", e.from, e.to);
            edges.push(Edge::new(resolve(&e.from, &ctx)?, resolve(&e.to, &ctx)?));
        }
        let mut study_inputs = Vec::with_capacity(doc.study_inputs.len());
        for s in &doc.study_inputs {
            study_inputs.push(resolve(s, "study_inputs")?);
        }

        Ok(Pipeline {
            name: doc.name.unwrap_or_else(|| doc.id.clone()),
            id: doc.id,
            actors,
            tasks,
            edges,
            study_inputs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "id": "one",
        "actors": {"echo": {"version": "1", "command": "echo hi", "outputs": []}},
        "tasks": {"t1": {"actor": "echo", "version": "1"}}
    }"#;

    #[test]
    fn minimal_document() {
        let p = parse_pipeline(MINIMAL).unwrap();
        assert_eq!(p.tasks.len(), 1);
        assert_eq!(p.edges.len(), 0);
        assert_eq!(p.name, "one");
    }

    #[test]
    fn dangling_edge_is_unknown_task() {
        let doc = r#"{
            "id": "x",
            "actors": {"echo": {"version": "1", "command": "echo", "inputs": ["i"], "outputs": ["o"]}},
            "tasks": {"t1": {"actor": "echo", "version": "1"}},
            "edges": [{"from": "tX.o", "to": "t1.i"}]
        }"#;
        assert!(matches!(
            parse_pipeline(doc),
            Err(ParseError::UnknownTaskRef { reference, .. }) if reference == "tX"
        ));
    }

    #[test]
    fn unknown_actor_and_port() {
        let doc = r#"{"id": "x", "actors": {},
            "tasks": {"t1": {"actor": "ghost", "version": "1"}}}"#;
        assert!(matches!(
            parse_pipeline(doc),
            Err(ParseError::UnknownActorRef { .. })
        ));

        let doc = r#"{"id": "x",
            "actors": {"echo": {"version": "1", "command": "echo", "outputs": ["o"]}},
            "tasks": {"t1": {"actor": "echo", "version": "2"}}}"#;
        assert!(matches!(
            parse_pipeline(doc),
            Err(ParseError::UnknownActorRef { .. })
        ));

        let doc = r#"{"id": "x",
            "actors": {"echo": {"version": "1", "command": "echo", "outputs": ["o"]}},
            "tasks": {"t1": {"actor": "echo"}},
            "study_inputs": ["t1.nope"]}"#;
        assert!(matches!(
            parse_pipeline(doc),
            Err(ParseError::UnknownPortRef { .. })
        ));
    }

    #[test]
    fn malformed_json_is_syntax_error() {
        assert!(matches!(parse_pipeline("{"), Err(ParseError::Syntax(_))));
        assert!(matches!(
            parse_pipeline(r#"{"id": "x", "actors": {}, "tasks": {}, "bogus": 1}"#),
            Err(ParseError::Syntax(_))
        ));
        let bad_edge = r#"{"id": "x",
            "actors": {"echo": {"version": "1", "command": "echo", "outputs": ["o"]}},
            "tasks": {"t1": {"actor": "echo"}},
            "edges": [{"from": "t1o", "to": "t1.o"}]}"#;
        assert!(matches!(
            parse_pipeline(bad_edge),
            Err(ParseError::Syntax(_))
        ));
    }

    #[test]
    fn duplicate_task_keys_survive_parsing() {
        let doc = r#"{"id": "x",
            "actors": {"echo": {"version": "1", "command": "echo", "outputs": ["o"]}},
            "tasks": {"t1": {"actor": "echo"}, "t1": {"actor": "echo"}}}"#;
        let p = parse_pipeline(doc).unwrap();
        assert_eq!(p.tasks.len(), 2);
    }

    #[test]
    fn numeric_params_become_text() {
        let doc = r#"{"id": "x",
            "actors": {"bet": {"version": "1", "command": "bet -f {param:f}", "params": ["f"]}},
            "tasks": {"t1": {"actor": "bet", "params": {"f": 0.5}}}}"#;
        let p = parse_pipeline(doc).unwrap();
        assert_eq!(p.tasks[0].params["f"], "0.5");
    }
}
