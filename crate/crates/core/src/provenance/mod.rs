//! Append-only provenance log.
//!
//! Every event is one JSON line in the log file; the in-memory indexes are a
//! pure function of the log, so replaying the file reproduces them exactly.
//! Several handles (in one process or many) may share a log file: appends take
//! an exclusive file lock and first catch up with lines written by others.

mod event;
mod lineage;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{ArtifactId, ArtifactStore};
use crate::catalog::StudySet;
use crate::enactor::{ExecStatus, ExecutionResult};
use crate::glue::JobState;
use crate::pipeline::Pipeline;
use crate::planner::ExecutionPlan;

pub use event::{
    ArtifactRecord, Classification, EventBody, EventFilter, EventKind, NewEvent, ProducedBy,
    ProvenanceEvent, TaskTransition,
};
pub use lineage::{LineageEdge, LineageGraph, LineageNode, Relation};

pub const CACHE_CAPACITY: usize = 128;

#[derive(Debug, Error)]
pub enum ProvError {
    #[error("storage error: {0}")]
    Storage(String),
    #[error("illegal transition {from} -> {to} for {attempt}")]
    IllegalTransition {
        attempt: String,
        from: String,
        to: String,
    },
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("unknown artifact `{0}`")]
    UnknownArtifact(String),
    #[error("event log line {line} is corrupt: {message}")]
    Corrupt { line: u64, message: String },
}

impl From<io::Error> for ProvError {
    fn from(e: io::Error) -> Self {
        ProvError::Storage(e.to_string())
    }
}

/// Source of event timestamps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clock {
    #[default]
    System,
    /// `2000-01-01T00:00:00Z` plus `seq` seconds. Makes logs reproducible.
    Logical,
}

impl Clock {
    pub fn at(self, seq: u64) -> DateTime<Utc> {
        match self {
            Clock::System => Utc::now(),
            Clock::Logical => Utc.timestamp_opt(946_684_800 + seq as i64, 0).unwrap(),
        }
    }
}

type InstanceKey = (String, String, Option<u32>);
type AttemptKey = (String, String, Option<u32>, u32);

fn attempt_name(k: &AttemptKey) -> String {
    match k.2 {
        Some(i) => format!("{}/{}[{}] attempt {}", k.0, k.1, i, k.3),
        None => format!("{}/{} attempt {}", k.0, k.1, k.3),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecutionState {
    Pending,
    Running,
    Succeeded,
    Failed,
    Canceled,
}

impl From<ExecStatus> for ExecutionState {
    fn from(s: ExecStatus) -> Self {
        match s {
            ExecStatus::Succeeded => ExecutionState::Succeeded,
            ExecStatus::Failed => ExecutionState::Failed,
            ExecStatus::Canceled => ExecutionState::Canceled,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptSummary {
    pub task_id: String,
    pub study_index: Option<u32>,
    pub attempt: u32,
    pub state: JobState,
}

/// Execution status as reconstructed from the log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionSummary {
    pub execution_id: String,
    pub plan_id: String,
    pub pipeline_id: String,
    pub backend: String,
    pub status: ExecutionState,
    pub attempts: Vec<AttemptSummary>,
    pub result: Option<ExecutionResult>,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct ExecIndex {
    started: u64,
    ended: Option<u64>,
}

/// Everything derivable from the log. Two states are equal iff their logs are.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StoreState {
    events: Vec<ProvenanceEvent>,
    pipelines: BTreeMap<String, u64>,
    study_sets: BTreeMap<String, u64>,
    plans: BTreeMap<String, u64>,
    executions: BTreeMap<String, ExecIndex>,
    /// First ARTIFACT_CREATED for each id; its producer is authoritative.
    artifacts: BTreeMap<ArtifactId, u64>,
    /// Task instance to (first artifact event, consumed inputs).
    instances: BTreeMap<InstanceKey, (u64, BTreeSet<ArtifactId>)>,
    attempts: BTreeMap<AttemptKey, JobState>,
}

impl StoreState {
    pub fn replay(events: impl IntoIterator<Item = ProvenanceEvent>) -> Result<Self, ProvError> {
        let mut s = StoreState::default();
        for e in events {
            s.check(&e)?;
            s.apply(e);
        }
        Ok(s)
    }

    pub fn events(&self) -> &[ProvenanceEvent] {
        &self.events
    }

    pub fn last_seq(&self) -> u64 {
        self.events.len() as u64
    }

    fn event(&self, seq: u64) -> &ProvenanceEvent {
        &self.events[seq as usize - 1]
    }

    fn live_execution<'e>(&self, e: &'e ProvenanceEvent) -> Result<&'e str, ProvError> {
        let Some(id) = e.execution_id.as_deref() else {
            return Err(ProvError::InvalidEvent(format!(
                "{} needs an execution_id",
                e.kind()
            )));
        };
        match self.executions.get(id) {
            None => Err(ProvError::InvalidEvent(format!(
                "execution `{id}` was never started"
            ))),
            Some(x) if x.ended.is_some() => Err(ProvError::InvalidEvent(format!(
                "execution `{id}` already ended"
            ))),
            Some(_) => Ok(id),
        }
    }

    fn check(&self, e: &ProvenanceEvent) -> Result<(), ProvError> {
        let invalid = |m: String| Err(ProvError::InvalidEvent(m));
        if e.seq != self.last_seq() + 1 {
            return invalid(format!(
                "sequence {} does not follow {}",
                e.seq,
                self.last_seq()
            ));
        }
        match &e.body {
            EventBody::PipelineRegistered { .. } => {}
            EventBody::StudysetCreated { set } => {
                if self.study_sets.contains_key(&set.set_id) {
                    return invalid(format!("study set `{}` already exists", set.set_id));
                }
            }
            EventBody::Anonymized {
                source_set_id,
                target_set_id,
                ..
            } => {
                for id in [source_set_id, target_set_id] {
                    if !self.study_sets.contains_key(id) {
                        return invalid(format!("unknown study set `{id}`"));
                    }
                }
            }
            EventBody::PlanCreated { plan, pipeline } => {
                if self.plans.contains_key(&plan.plan_id) {
                    return invalid(format!("plan `{}` already recorded", plan.plan_id));
                }
                if plan.pipeline_id != pipeline.id {
                    return invalid(format!(
                        "plan is for `{}`, not `{}`",
                        plan.pipeline_id, pipeline.id
                    ));
                }
            }
            EventBody::ExecStarted { plan_id, .. } => {
                let Some(id) = e.execution_id.as_deref() else {
                    return invalid("EXEC_STARTED needs an execution_id".into());
                };
                if self.executions.contains_key(id) {
                    return invalid(format!("execution `{id}` already started"));
                }
                if !self.plans.contains_key(plan_id) {
                    return invalid(format!("unknown plan `{plan_id}`"));
                }
            }
            EventBody::TaskTransition(t) => {
                let exec = self.live_execution(e)?;
                if t.attempt == 0 {
                    return invalid("attempts are numbered from 1".into());
                }
                let key = (
                    exec.to_string(),
                    t.task_id.clone(),
                    t.study_index,
                    t.attempt,
                );
                let current = self.attempts.get(&key).copied();
                let illegal = || {
                    Err(ProvError::IllegalTransition {
                        attempt: attempt_name(&key),
                        from: t.from.map_or("-".into(), |s| s.to_string()),
                        to: t.to.to_string(),
                    })
                };
                if current != t.from || !JobState::can_transition(t.from, t.to) {
                    return illegal();
                }
                if current.is_none() {
                    // a new attempt: numbered consecutively, previous ones finished
                    let siblings = self.attempts.range(
                        (key.0.clone(), key.1.clone(), key.2, 0)
                            ..(key.0.clone(), key.1.clone(), key.2, u32::MAX),
                    );
                    let mut count = 0;
                    for (_, s) in siblings {
                        count += 1;
                        if !s.is_terminal() {
                            return invalid(format!(
                                "{} starts while an earlier attempt is unfinished",
                                attempt_name(&key)
                            ));
                        }
                    }
                    if t.attempt != count + 1 {
                        return invalid(format!("{} skips an attempt number", attempt_name(&key)));
                    }
                }
            }
            EventBody::ArtifactCreated { artifact, inputs } => {
                for i in inputs {
                    if !self.artifacts.contains_key(i) {
                        return invalid(format!("input artifact `{i}` is not recorded"));
                    }
                }
                if let ProducedBy::Task { execution_id, .. } = &artifact.produced_by {
                    let exec = self.live_execution(e)?;
                    if exec != execution_id {
                        return invalid(format!(
                            "artifact claims execution `{execution_id}` inside `{exec}`"
                        ));
                    }
                }
            }
            EventBody::ExecEnded { result } => {
                let exec = self.live_execution(e)?;
                if result.execution_id != exec {
                    return invalid(format!("result of `{}` ends `{exec}`", result.execution_id));
                }
                let open = self
                    .attempts
                    .iter()
                    .find(|(k, s)| k.0 == exec && !s.is_terminal());
                if let Some((k, s)) = open {
                    return invalid(format!("{} is still {s}", attempt_name(k)));
                }
            }
        }
        Ok(())
    }

    fn apply(&mut self, e: ProvenanceEvent) {
        let seq = e.seq;
        let exec = e.execution_id.clone().unwrap_or_default();
        match &e.body {
            EventBody::PipelineRegistered { pipeline } => {
                self.pipelines.insert(pipeline.id.clone(), seq);
            }
            EventBody::StudysetCreated { set } => {
                self.study_sets.insert(set.set_id.clone(), seq);
            }
            EventBody::Anonymized { .. } => {}
            EventBody::PlanCreated { plan, .. } => {
                self.plans.insert(plan.plan_id.clone(), seq);
            }
            EventBody::ExecStarted { .. } => {
                self.executions.insert(
                    exec,
                    ExecIndex {
                        started: seq,
                        ended: None,
                    },
                );
            }
            EventBody::TaskTransition(t) => {
                self.attempts
                    .insert((exec, t.task_id.clone(), t.study_index, t.attempt), t.to);
            }
            EventBody::ArtifactCreated { artifact, inputs } => {
                self.artifacts
                    .entry(artifact.artifact_id.clone())
                    .or_insert(seq);
                if let ProducedBy::Task {
                    execution_id,
                    task_id,
                    study_index,
                    ..
                } = &artifact.produced_by
                {
                    let entry = self
                        .instances
                        .entry((execution_id.clone(), task_id.clone(), *study_index))
                        .or_insert((seq, BTreeSet::new()));
                    entry.1.extend(inputs.iter().cloned());
                }
            }
            EventBody::ExecEnded { .. } => {
                if let Some(x) = self.executions.get_mut(&exec) {
                    x.ended = Some(seq);
                }
            }
        }
        self.events.push(e);
    }

    pub fn pipeline(&self, id: &str) -> Option<&Pipeline> {
        match &self.event(*self.pipelines.get(id)?).body {
            EventBody::PipelineRegistered { pipeline } => Some(pipeline),
            _ => None,
        }
    }

    pub fn study_set(&self, id: &str) -> Option<&StudySet> {
        match &self.event(*self.study_sets.get(id)?).body {
            EventBody::StudysetCreated { set } => Some(set),
            _ => None,
        }
    }

    pub fn study_set_ids(&self) -> impl Iterator<Item = &str> {
        self.study_sets.keys().map(String::as_str)
    }

    pub fn plan(&self, id: &str) -> Option<(&ExecutionPlan, &Pipeline)> {
        match &self.event(*self.plans.get(id)?).body {
            EventBody::PlanCreated { plan, pipeline } => Some((plan, pipeline)),
            _ => None,
        }
    }

    pub fn artifact(&self, id: &ArtifactId) -> Option<&ArtifactRecord> {
        match &self.event(*self.artifacts.get(id)?).body {
            EventBody::ArtifactCreated { artifact, .. } => Some(artifact),
            _ => None,
        }
    }

    pub fn artifact_ids(&self) -> impl Iterator<Item = &ArtifactId> {
        self.artifacts.keys()
    }

    pub fn execution(&self, id: &str) -> Option<ExecutionSummary> {
        let x = self.executions.get(id)?;
        let EventBody::ExecStarted {
            plan_id,
            pipeline_id,
            backend,
            ..
        } = &self.event(x.started).body
        else {
            return None;
        };
        let result = x.ended.and_then(|seq| match &self.event(seq).body {
            EventBody::ExecEnded { result } => Some(result.clone()),
            _ => None,
        });
        let attempts: Vec<AttemptSummary> = self
            .attempts
            .iter()
            .filter(|(k, _)| k.0 == id)
            .map(|(k, s)| AttemptSummary {
                task_id: k.1.clone(),
                study_index: k.2,
                attempt: k.3,
                state: *s,
            })
            .collect();
        let status = match &result {
            Some(r) => r.status.into(),
            None if attempts.is_empty() => ExecutionState::Pending,
            None => ExecutionState::Running,
        };
        Some(ExecutionSummary {
            execution_id: id.to_string(),
            plan_id: plan_id.clone(),
            pipeline_id: pipeline_id.clone(),
            backend: backend.clone(),
            status,
            attempts,
            result,
        })
    }

    pub fn execution_ids(&self) -> impl Iterator<Item = &str> {
        self.executions.keys().map(String::as_str)
    }

    pub fn query(&self, filter: &EventFilter) -> Vec<ProvenanceEvent> {
        let lo = filter.seq_from.unwrap_or(1).max(1) as usize - 1;
        let hi = filter
            .seq_to
            .map_or(self.events.len(), |t| (t as usize).min(self.events.len()));
        if lo >= hi {
            return Vec::new();
        }
        self.events[lo..hi]
            .iter()
            .filter(|e| filter.matches(e))
            .cloned()
            .collect()
    }

    pub fn lineage(&self, root: &ArtifactId) -> Result<LineageGraph, ProvError> {
        lineage::build(self, root)
    }
}

struct Cache {
    entries: HashMap<EventFilter, Arc<Vec<ProvenanceEvent>>>,
    order: VecDeque<EventFilter>,
}

impl Cache {
    fn new() -> Self {
        Cache {
            entries: HashMap::new(),
            order: VecDeque::new(),
        }
    }

    fn invalidate(&mut self, e: &ProvenanceEvent) {
        let before = self.entries.len();
        self.entries.retain(|f, _| !f.matches(e));
        if self.entries.len() != before {
            self.order.retain(|f| self.entries.contains_key(f));
        }
    }

    fn insert(&mut self, f: EventFilter, v: Arc<Vec<ProvenanceEvent>>) {
        if self.entries.insert(f.clone(), v).is_none() {
            self.order.push_back(f);
        }
        while self.order.len() > CACHE_CAPACITY {
            if let Some(old) = self.order.pop_front() {
                self.entries.remove(&old);
            }
        }
    }
}

struct Inner {
    state: StoreState,
    offset: u64,
    lines: u64,
    cache: Cache,
}

impl Inner {
    fn push(&mut self, e: ProvenanceEvent) {
        self.cache.invalidate(&e);
        self.state.apply(e);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub entries: usize,
}

pub struct ProvenanceStore {
    path: Option<PathBuf>,
    clock: Clock,
    inner: RwLock<Inner>,
    append: Mutex<()>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl ProvenanceStore {
    /// Opens (creating if needed) a log file and replays it.
    pub fn open(path: impl Into<PathBuf>, clock: Clock) -> Result<Self, ProvError> {
        let path = path.into();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        OpenOptions::new().create(true).append(true).open(&path)?;
        let store = Self::with_path(Some(path), clock);
        store.refresh()?;
        Ok(store)
    }

    /// A store with no backing file.
    pub fn in_memory(clock: Clock) -> Self {
        Self::with_path(None, clock)
    }

    fn with_path(path: Option<PathBuf>, clock: Clock) -> Self {
        ProvenanceStore {
            path,
            clock,
            inner: RwLock::new(Inner {
                state: StoreState::default(),
                offset: 0,
                lines: 0,
                cache: Cache::new(),
            }),
            append: Mutex::new(()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    /// Reads a log file from scratch.
    pub fn replay_file(path: &Path) -> Result<StoreState, ProvError> {
        let mut inner = Inner {
            state: StoreState::default(),
            offset: 0,
            lines: 0,
            cache: Cache::new(),
        };
        let mut file = File::open(path)?;
        catch_up(&mut file, &mut inner)?;
        Ok(inner.state)
    }

    fn refresh(&self) -> Result<(), ProvError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let mut file = File::open(path)?;
        let len = file.metadata()?.len();
        if len == self.inner.read().unwrap().offset {
            return Ok(());
        }
        let mut inner = self.inner.write().unwrap();
        catch_up(&mut file, &mut inner)
    }

    /// Appends an event and returns its sequence number.
    pub fn record(&self, e: NewEvent) -> Result<u64, ProvError> {
        self.record_with(|_, _| Ok::<_, ProvError>(e))
            .map(|e| e.seq)
    }

    /// Appends the event `build` makes from the sequence number and
    /// timestamp it will get. `build` runs while appends are serialized, so
    /// identifiers derived from `seq` are unique.
    pub fn record_with<E, F>(&self, build: F) -> Result<ProvenanceEvent, E>
    where
        E: From<ProvError>,
        F: FnOnce(u64, DateTime<Utc>) -> Result<NewEvent, E>,
    {
        self.record_if(|_, seq, at| build(seq, at).map(Some))
            .map(|e| e.expect("builder always yields an event"))
    }

    /// Like [`record_with`](Self::record_with), but `build` also sees the
    /// caught-up state and may decline to append by returning `None`.
    /// Check-then-append is atomic across handles on the same file.
    pub fn record_if<E, F>(&self, build: F) -> Result<Option<ProvenanceEvent>, E>
    where
        E: From<ProvError>,
        F: FnOnce(&StoreState, u64, DateTime<Utc>) -> Result<Option<NewEvent>, E>,
    {
        let _serial = self.append.lock().unwrap();
        let mut file = match &self.path {
            Some(p) => Some(
                OpenOptions::new()
                    .read(true)
                    .append(true)
                    .open(p)
                    .map_err(ProvError::from)?,
            ),
            None => None,
        };
        if let Some(f) = &file {
            f.lock().map_err(ProvError::from)?;
        }
        let result = (|| {
            let mut inner = self.inner.write().unwrap();
            if let Some(f) = file.as_mut() {
                catch_up(f, &mut inner)?;
            }
            let seq = inner.state.last_seq() + 1;
            let at = self.clock.at(seq);
            let Some(new) = build(&inner.state, seq, at)? else {
                return Ok(None);
            };
            let event = ProvenanceEvent {
                seq,
                at,
                execution_id: new.execution_id,
                body: new.body,
            };
            inner.state.check(&event)?;
            if let Some(f) = file.as_mut() {
                let mut line =
                    serde_json::to_vec(&event).map_err(|e| ProvError::Storage(e.to_string()))?;
                line.push(b'\n');
                f.write_all(&line).map_err(ProvError::from)?;
                f.sync_data().map_err(ProvError::from)?;
                inner.offset += line.len() as u64;
                inner.lines += 1;
            }
            inner.push(event.clone());
            Ok(Some(event))
        })();
        if let Some(f) = &file {
            let _ = f.unlock();
        }
        result
    }

    /// A consistent copy of the derived state.
    pub fn snapshot(&self) -> Result<StoreState, ProvError> {
        self.refresh()?;
        Ok(self.inner.read().unwrap().state.clone())
    }

    /// Runs `f` against the current state without copying it.
    pub fn read<R>(&self, f: impl FnOnce(&StoreState) -> R) -> Result<R, ProvError> {
        self.refresh()?;
        Ok(f(&self.inner.read().unwrap().state))
    }

    /// All and only matching events, in sequence order.
    pub fn query_events(&self, filter: &EventFilter) -> Result<Vec<ProvenanceEvent>, ProvError> {
        self.read(|s| s.query(filter))
    }

    /// Same result as [`query_events`](Self::query_events), served from a
    /// bounded cache when no matching event arrived since the last call.
    pub fn cached_query(&self, filter: &EventFilter) -> Result<Vec<ProvenanceEvent>, ProvError> {
        self.refresh()?;
        if let Some(hit) = self.inner.read().unwrap().cache.entries.get(filter) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit.as_ref().clone());
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let mut inner = self.inner.write().unwrap();
        let result = Arc::new(inner.state.query(filter));
        inner.cache.insert(filter.clone(), result.clone());
        Ok(result.as_ref().clone())
    }

    pub fn cache_stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            entries: self.inner.read().unwrap().cache.entries.len(),
        }
    }

    pub fn lineage(&self, artifact: &ArtifactId) -> Result<LineageGraph, ProvError> {
        self.read(|s| s.lineage(artifact))?
    }

    /// Records an artifact that entered from outside any execution, unless
    /// it is already known.
    pub fn import_external(&self, store: &ArtifactStore, id: &ArtifactId) -> Result<(), ProvError> {
        if self.read(|s| s.artifact(id).is_some())? {
            return Ok(());
        }
        let size_bytes = store
            .size_of(id)
            .map_err(|e| ProvError::Storage(e.to_string()))?;
        let record = ArtifactRecord {
            artifact_id: id.clone(),
            produced_by: ProducedBy::External,
            classification: Classification::Persistent,
            size_bytes,
        };
        self.record(NewEvent::global(EventBody::ArtifactCreated {
            artifact: record,
            inputs: vec![],
        }))
        .map(|_| ())
    }

    /// Artifact ids whose stored bytes are missing or do not hash to the id.
    pub fn unverified_artifacts(
        &self,
        store: &ArtifactStore,
    ) -> Result<Vec<ArtifactId>, ProvError> {
        let ids: Vec<ArtifactId> = self.read(|s| s.artifact_ids().cloned().collect())?;
        Ok(ids
            .into_iter()
            .filter(|id| match store.read(id) {
                Ok(bytes) => ArtifactId::of_bytes(&bytes) != *id,
                Err(_) => true,
            })
            .collect())
    }
}

fn catch_up(file: &mut File, inner: &mut Inner) -> Result<(), ProvError> {
    file.seek(SeekFrom::Start(inner.offset))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 || !line.ends_with('\n') {
            return Ok(());
        }
        let number = inner.lines + 1;
        let corrupt = |message: String| ProvError::Corrupt {
            line: number,
            message,
        };
        if !line.trim().is_empty() {
            let event: ProvenanceEvent =
                serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
            inner
                .state
                .check(&event)
                .map_err(|e| corrupt(e.to_string()))?;
            inner.push(event);
        }
        inner.offset += n as u64;
        inner.lines = number;
    }
}
