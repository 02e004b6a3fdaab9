use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::artifact::ArtifactId;
use crate::catalog::StudySet;
use crate::enactor::ExecutionResult;
use crate::glue::JobState;
use crate::pipeline::Pipeline;
use crate::planner::ExecutionPlan;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Classification {
    Transitory,
    Persistent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProducedBy {
    Task {
        execution_id: String,
        task_id: String,
        port: String,
        study_index: Option<u32>,
    },
    External,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub artifact_id: ArtifactId,
    pub produced_by: ProducedBy,
    pub classification: Classification,
    pub size_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTransition {
    pub task_id: String,
    pub study_index: Option<u32>,
    pub attempt: u32,
    pub from: Option<JobState>,
    pub to: JobState,
    pub site_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub diagnostics: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    PipelineRegistered,
    StudysetCreated,
    Anonymized,
    PlanCreated,
    ExecStarted,
    TaskTransition,
    ArtifactCreated,
    ExecEnded,
}

impl EventKind {
    pub const ALL: [EventKind; 8] = [
        EventKind::PipelineRegistered,
        EventKind::StudysetCreated,
        EventKind::Anonymized,
        EventKind::PlanCreated,
        EventKind::ExecStarted,
        EventKind::TaskTransition,
        EventKind::ArtifactCreated,
        EventKind::ExecEnded,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::PipelineRegistered => "PIPELINE_REGISTERED",
            EventKind::StudysetCreated => "STUDYSET_CREATED",
            EventKind::Anonymized => "ANONYMIZED",
            EventKind::PlanCreated => "PLAN_CREATED",
            EventKind::ExecStarted => "EXEC_STARTED",
            EventKind::TaskTransition => "TASK_TRANSITION",
            EventKind::ArtifactCreated => "ARTIFACT_CREATED",
            EventKind::ExecEnded => "EXEC_ENDED",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown event kind `{s}`"))
    }
}

/// Kind-specific payload. Serialized as `"kind": ..., "payload": {...}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventBody {
    PipelineRegistered {
        pipeline: Pipeline,
    },
    StudysetCreated {
        set: StudySet,
    },
    Anonymized {
        source_set_id: String,
        target_set_id: String,
        /// Original image id to anonymized copy.
        image_map: BTreeMap<String, String>,
        /// `TAG:ACTION` per rule; literals and salt stay out of the log.
        rules: Vec<String>,
    },
    PlanCreated {
        plan: ExecutionPlan,
        pipeline: Pipeline,
    },
    ExecStarted {
        plan_id: String,
        pipeline_id: String,
        backend: String,
        retry_limit: u32,
    },
    TaskTransition(TaskTransition),
    ArtifactCreated {
        artifact: ArtifactRecord,
        /// Artifacts the producing task instance consumed.
        inputs: Vec<ArtifactId>,
    },
    ExecEnded {
        result: ExecutionResult,
    },
}

impl EventBody {
    pub fn kind(&self) -> EventKind {
        match self {
            EventBody::PipelineRegistered { .. } => EventKind::PipelineRegistered,
            EventBody::StudysetCreated { .. } => EventKind::StudysetCreated,
            EventBody::Anonymized { .. } => EventKind::Anonymized,
            EventBody::PlanCreated { .. } => EventKind::PlanCreated,
            EventBody::ExecStarted { .. } => EventKind::ExecStarted,
            EventBody::TaskTransition(_) => EventKind::TaskTransition,
            EventBody::ArtifactCreated { .. } => EventKind::ArtifactCreated,
            EventBody::ExecEnded { .. } => EventKind::ExecEnded,
        }
    }

    pub fn task_id(&self) -> Option<&str> {
        match self {
            EventBody::TaskTransition(t) => Some(&t.task_id),
            EventBody::ArtifactCreated {
                artifact:
                    ArtifactRecord {
                        produced_by: ProducedBy::Task { task_id, .. },
                        ..
                    },
                ..
            } => Some(task_id),
            _ => None,
        }
    }
}

/// An event before the log assigns its sequence number and timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct NewEvent {
    pub execution_id: Option<String>,
    pub body: EventBody,
}

impl NewEvent {
    pub fn global(body: EventBody) -> Self {
        NewEvent {
            execution_id: None,
            body,
        }
    }

    pub fn for_execution(execution_id: impl Into<String>, body: EventBody) -> Self {
        NewEvent {
            execution_id: Some(execution_id.into()),
            body,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEvent {
    pub seq: u64,
    pub at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution_id: Option<String>,
    #[serde(flatten)]
    pub body: EventBody,
}

impl ProvenanceEvent {
    pub fn kind(&self) -> EventKind {
        self.body.kind()
    }
}

/// Conjunctive event filter; unset fields match everything.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<EventKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_from: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_to: Option<u64>,
}

impl EventFilter {
    pub fn matches(&self, e: &ProvenanceEvent) -> bool {
        self.execution_id
            .as_deref()
            .is_none_or(|x| e.execution_id.as_deref() == Some(x))
            && self
                .task_id
                .as_deref()
                .is_none_or(|t| e.body.task_id() == Some(t))
            && self.kind.is_none_or(|k| e.kind() == k)
            && self.seq_from.is_none_or(|s| e.seq >= s)
            && self.seq_to.is_none_or(|s| e.seq <= s)
    }

    /// Stable cache key.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("filter serializes")
    }

    /// Parses `key=value` pairs separated by commas, e.g.
    /// `task=b,kind=TASK_TRANSITION,exec=exec-000004,from=1,to=40`.
    pub fn parse_spec(spec: &str) -> Result<Self, String> {
        let mut f = EventFilter::default();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("filter term `{part}` is not key=value"))?;
            let seq = || {
                value
                    .parse::<u64>()
                    .map_err(|_| format!("`{value}` is not a sequence number"))
            };
            match key.trim() {
                "exec" | "execution" | "execution_id" => f.execution_id = Some(value.to_string()),
                "task" | "task_id" => f.task_id = Some(value.to_string()),
                "kind" => f.kind = Some(value.parse()?),
                "from" | "seq_from" => f.seq_from = Some(seq()?),
                "to" | "seq_to" => f.seq_to = Some(seq()?),
                other => return Err(format!("unknown filter key `{other}`")),
            }
        }
        Ok(f)
    }
}
