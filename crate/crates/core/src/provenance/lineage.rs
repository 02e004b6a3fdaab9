use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{ArtifactRecord, ProducedBy, ProvError, StoreState};
use crate::artifact::ArtifactId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Relation {
    /// artifact -> task instance that produced it
    ProducedBy,
    /// task instance -> artifact it read
    Consumed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LineageNode {
    Artifact {
        id: String,
        seq: u64,
        record: ArtifactRecord,
    },
    Task {
        id: String,
        seq: u64,
        execution_id: String,
        task_id: String,
        study_index: Option<u32>,
    },
}

impl LineageNode {
    pub fn id(&self) -> &str {
        match self {
            LineageNode::Artifact { id, .. } | LineageNode::Task { id, .. } => id,
        }
    }

    pub fn seq(&self) -> u64 {
        match self {
            LineageNode::Artifact { seq, .. } | LineageNode::Task { seq, .. } => *seq,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LineageEdge {
    pub from: String,
    pub to: String,
    pub relation: Relation,
}

/// Ancestry of one artifact, back to its external inputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageGraph {
    pub root: ArtifactId,
    /// Ordered by the sequence number that introduced each node.
    pub nodes: Vec<LineageNode>,
    pub edges: Vec<LineageEdge>,
}

impl LineageGraph {
    pub fn tasks(&self) -> impl Iterator<Item = (&str, Option<u32>)> {
        self.nodes.iter().filter_map(|n| match n {
            LineageNode::Task {
                task_id,
                study_index,
                ..
            } => Some((task_id.as_str(), *study_index)),
            _ => None,
        })
    }

    pub fn artifacts(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().filter_map(|n| match n {
            LineageNode::Artifact { id, .. } => Some(id.as_str()),
            _ => None,
        })
    }
}

pub fn task_node_id(execution_id: &str, task_id: &str, study_index: Option<u32>) -> String {
    match study_index {
        Some(i) => format!("{execution_id}/{task_id}[{i}]"),
        None => format!("{execution_id}/{task_id}"),
    }
}

pub(super) fn build(state: &StoreState, root: &ArtifactId) -> Result<LineageGraph, ProvError> {
    if state.artifact(root).is_none() {
        return Err(ProvError::UnknownArtifact(root.to_string()));
    }
    let mut nodes: BTreeMap<String, LineageNode> = BTreeMap::new();
    let mut edges = BTreeSet::new();
    let mut queue = VecDeque::from([root.clone()]);
    let mut seen = BTreeSet::from([root.clone()]);
    while let Some(id) = queue.pop_front() {
        let seq = state.artifacts[&id];
        let record = state.artifact(&id).expect("indexed").clone();
        let producer = record.produced_by.clone();
        nodes.insert(
            id.to_string(),
            LineageNode::Artifact {
                id: id.to_string(),
                seq,
                record,
            },
        );
        let ProducedBy::Task {
            execution_id,
            task_id,
            study_index,
            ..
        } = producer
        else {
            continue;
        };
        let task_id_str = task_node_id(&execution_id, &task_id, study_index);
        edges.insert(LineageEdge {
            from: id.to_string(),
            to: task_id_str.clone(),
            relation: Relation::ProducedBy,
        });
        if nodes.contains_key(&task_id_str) {
            continue;
        }
        let (first, inputs) =
            &state.instances[&(execution_id.clone(), task_id.clone(), study_index)];
        nodes.insert(
            task_id_str.clone(),
            LineageNode::Task {
                id: task_id_str.clone(),
                seq: *first,
                execution_id,
                task_id,
                study_index,
            },
        );
        for input in inputs {
            edges.insert(LineageEdge {
                from: task_id_str.clone(),
                to: input.to_string(),
                relation: Relation::Consumed,
            });
            if seen.insert(input.clone()) {
                queue.push_back(input.clone());
            }
        }
    }
    let mut nodes: Vec<LineageNode> = nodes.into_values().collect();
    nodes.sort_by(|a, b| a.seq().cmp(&b.seq()).then_with(|| a.id().cmp(b.id())));
    Ok(LineageGraph {
        root: root.clone(),
        nodes,
        edges: edges.into_iter().collect(),
    })
}
