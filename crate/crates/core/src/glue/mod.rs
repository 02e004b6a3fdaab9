//! Middleware-neutral job and file API.
//!
//! Upper layers submit [`JobDescription`]s and hold opaque [`JobHandle`]s.
//! Each backend is an [`Adaptor`] registered under a name at startup; the
//! [`Glue`] front dispatches to it and enforces the job state machine, so
//! nothing adaptor-specific crosses this boundary.
//!
//! ```text
//! PENDING -> STAGING -> RUNNING -> DONE | FAILED
//!    any non-terminal state   -> CANCELED
//! ```

pub mod config;
mod local;
mod simgrid;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Component, Path};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::ArtifactLocator;

pub use local::LocalAdaptor;
pub use simgrid::{FaultSpec, SimGridAdaptor, SimGridConfig};

pub const LABEL_TASK: &str = "task_id";
pub const LABEL_ATTEMPT: &str = "attempt";
pub const LABEL_STAGE: &str = "stage";
pub const LABEL_STUDY_INDEX: &str = "study_index";
pub const LABEL_ACTOR: &str = "actor";
pub const LABEL_EXECUTION: &str = "execution_id";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GlueError {
    #[error("backend `{0}` is already registered")]
    DuplicateBackend(String),
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error("invalid job description: {0}")]
    InvalidJobDescription(String),
    #[error("unknown job handle `{0}`")]
    UnknownHandle(String),
    #[error("source artifact `{0}` is missing")]
    SourceMissing(String),
    #[error("transferred content has digest {actual}, destination expects {expected}")]
    DigestMismatch { expected: String, actual: String },
    #[error("backend error: {0}")]
    Backend(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Pending,
    Staging,
    Running,
    Done,
    Failed,
    Canceled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Canceled)
    }

    fn rank(self) -> u8 {
        match self {
            JobState::Pending => 0,
            JobState::Staging => 1,
            JobState::Running => 2,
            JobState::Done | JobState::Failed | JobState::Canceled => 3,
        }
    }

    /// One legal step of the state machine. `None` is "not yet submitted".
    pub fn can_transition(from: Option<JobState>, to: JobState) -> bool {
        use JobState::*;
        match from {
            None => to == Pending,
            Some(f) if f.is_terminal() => false,
            Some(_) if to == Canceled => true,
            Some(Pending) => to == Staging,
            Some(Staging) => to == Running,
            Some(Running) => matches!(to, Done | Failed),
            Some(_) => false,
        }
    }

    /// The legal single steps leading from `self` to `to`, or `None` when `to`
    /// is not reachable. Observers that poll can skip states; this fills them in.
    pub fn steps_to(self, to: JobState) -> Option<Vec<JobState>> {
        use JobState::*;
        if self == to {
            return Some(Vec::new());
        }
        if self.is_terminal() {
            return None;
        }
        if to == Canceled {
            return Some(vec![Canceled]);
        }
        let chain = [Pending, Staging, Running];
        let start = chain.iter().position(|s| *s == self)?;
        let mut out: Vec<JobState> = chain[start + 1..].to_vec();
        match to {
            Done | Failed => out.push(to),
            _ => {
                let end = out.iter().position(|s| *s == to)?;
                out.truncate(end + 1);
            }
        }
        Some(out)
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            JobState::Pending => "PENDING",
            JobState::Staging => "STAGING",
            JobState::Running => "RUNNING",
            JobState::Done => "DONE",
            JobState::Failed => "FAILED",
            JobState::Canceled => "CANCELED",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobStatus {
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub diagnostics: String,
    /// Staged-out outputs by working-directory name; filled once DONE.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub outputs: BTreeMap<String, ArtifactLocator>,
}

impl JobStatus {
    pub fn new(state: JobState) -> Self {
        JobStatus {
            state,
            exit_code: None,
            diagnostics: String::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn finished(state: JobState, exit_code: i32, diagnostics: impl Into<String>) -> Self {
        JobStatus {
            state,
            exit_code: Some(exit_code),
            diagnostics: diagnostics.into(),
            outputs: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagedInput {
    pub locator: ArtifactLocator,
    /// Working-directory-relative name.
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobDescription {
    pub executable: String,
    pub arguments: Vec<String>,
    pub input_files: Vec<StagedInput>,
    pub output_files: Vec<String>,
    #[serde(default)]
    pub side_effect_free: bool,
    pub site_id: String,
    pub labels: BTreeMap<String, String>,
}

impl JobDescription {
    pub fn label(&self, key: &str) -> Option<&str> {
        self.labels.get(key).map(String::as_str)
    }

    pub fn check(&self) -> Result<(), GlueError> {
        let invalid = |m: String| Err(GlueError::InvalidJobDescription(m));
        if self.executable.is_empty() {
            return invalid("empty executable".into());
        }
        if self.output_files.is_empty() && !self.side_effect_free {
            return invalid("no output files and not declared side-effect-free".into());
        }
        let mut names = BTreeSet::new();
        let all = self
            .input_files
            .iter()
            .map(|i| i.name.as_str())
            .chain(self.output_files.iter().map(String::as_str));
        for name in all {
            let relative = !name.is_empty()
                && Path::new(name)
                    .components()
                    .all(|c| matches!(c, Component::Normal(_)));
            if !relative {
                return invalid(format!("`{name}` is not a working-directory-relative name"));
            }
            if !names.insert(name) {
                return invalid(format!("`{name}` is staged twice"));
            }
        }
        Ok(())
    }
}

/// Opaque reference to a submitted job.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JobHandle {
    pub handle_id: String,
    pub backend: String,
    pub submitted_at: DateTime<Utc>,
}

/// The backend's own name for a job.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BackendJobId(pub String);

/// What every middleware adaptor provides.
///
/// `poll` must not block, and once it reports a terminal state it keeps
/// reporting that state.
pub trait Adaptor: Send + Sync {
    fn submit(&self, job: &JobDescription) -> Result<BackendJobId, GlueError>;
    fn poll(&self, job: &BackendJobId) -> Result<JobStatus, GlueError>;
    /// Cancels a non-terminal job and returns the resulting status; a job that
    /// already finished keeps its terminal status.
    fn cancel(&self, job: &BackendJobId) -> Result<JobStatus, GlueError>;
    fn stage_in(&self, src: &ArtifactLocator, dest: &Path) -> Result<(), GlueError>;
    fn stage_out(&self, src: &Path) -> Result<ArtifactLocator, GlueError>;

    /// Called by drivers between poll rounds that observed no progress.
    /// Backends on virtual time advance it here.
    fn idle(&self) {
        std::thread::sleep(std::time::Duration::from_millis(2));
    }
}

struct Entry {
    backend: String,
    adaptor: Arc<dyn Adaptor>,
    job: BackendJobId,
    last: JobStatus,
}

/// The glueing front: adaptor registry plus handle bookkeeping.
#[derive(Default)]
pub struct Glue {
    adaptors: RwLock<BTreeMap<String, Arc<dyn Adaptor>>>,
    jobs: Mutex<HashMap<String, Entry>>,
    next: AtomicU64,
}

impl Glue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_adaptor(&self, name: &str, adaptor: Arc<dyn Adaptor>) -> Result<(), GlueError> {
        let mut map = self.adaptors.write().unwrap();
        if map.contains_key(name) {
            return Err(GlueError::DuplicateBackend(name.to_string()));
        }
        map.insert(name.to_string(), adaptor);
        Ok(())
    }

    /// Registered backend names, sorted.
    pub fn backends(&self) -> Vec<String> {
        self.adaptors.read().unwrap().keys().cloned().collect()
    }

    pub fn has_backend(&self, name: &str) -> bool {
        self.adaptors.read().unwrap().contains_key(name)
    }

    fn adaptor(&self, name: &str) -> Result<Arc<dyn Adaptor>, GlueError> {
        self.adaptors
            .read()
            .unwrap()
            .get(name)
            .cloned()
            .ok_or_else(|| GlueError::UnknownBackend(name.to_string()))
    }

    /// Hands the job to the backend and returns at once; the job starts PENDING.
    pub fn submit(&self, jd: &JobDescription, backend: &str) -> Result<JobHandle, GlueError> {
        let adaptor = self.adaptor(backend)?;
        jd.check()?;
        let job = adaptor.submit(jd)?;
        let handle = JobHandle {
            handle_id: format!("job-{:06}", self.next.fetch_add(1, Ordering::Relaxed) + 1),
            backend: backend.to_string(),
            submitted_at: Utc::now(),
        };
        self.jobs.lock().unwrap().insert(
            handle.handle_id.clone(),
            Entry {
                backend: backend.to_string(),
                adaptor,
                job,
                last: JobStatus::new(JobState::Pending),
            },
        );
        Ok(handle)
    }

    fn lookup(
        &self,
        h: &JobHandle,
    ) -> Result<(Arc<dyn Adaptor>, BackendJobId, JobStatus), GlueError> {
        let jobs = self.jobs.lock().unwrap();
        match jobs.get(&h.handle_id) {
            Some(e) if e.backend == h.backend => {
                Ok((e.adaptor.clone(), e.job.clone(), e.last.clone()))
            }
            _ => Err(GlueError::UnknownHandle(h.handle_id.clone())),
        }
    }

    fn merge(&self, h: &JobHandle, observed: JobStatus) -> JobStatus {
        let mut jobs = self.jobs.lock().unwrap();
        let entry = jobs.get_mut(&h.handle_id).expect("looked up before");
        let legal = entry.last.state.steps_to(observed.state).is_some();
        if legal && observed.state.rank() >= entry.last.state.rank() {
            entry.last = observed;
        }
        entry.last.clone()
    }

    /// Current state; never regresses and terminal states are absorbing.
    pub fn status(&self, h: &JobHandle) -> Result<JobStatus, GlueError> {
        let (adaptor, job, last) = self.lookup(h)?;
        if last.state.is_terminal() {
            return Ok(last);
        }
        let observed = adaptor.poll(&job)?;
        Ok(self.merge(h, observed))
    }

    pub fn cancel(&self, h: &JobHandle) -> Result<JobStatus, GlueError> {
        let current = self.status(h)?;
        if current.state.is_terminal() {
            return Ok(current);
        }
        let (adaptor, job, _) = self.lookup(h)?;
        let after = adaptor.cancel(&job)?;
        Ok(self.merge(h, after))
    }

    /// Copies `src` to `dst` through the backend's staging operations.
    pub fn transfer(
        &self,
        src: &ArtifactLocator,
        dst: &ArtifactLocator,
        backend: &str,
    ) -> Result<(), GlueError> {
        let adaptor = self.adaptor(backend)?;
        match dst {
            ArtifactLocator::File(path) => adaptor.stage_in(src, path),
            ArtifactLocator::Store(expected) => {
                let tmp = tempdir_for_transfer()?;
                let path = tmp.join("payload");
                let result = adaptor
                    .stage_in(src, &path)
                    .and_then(|_| adaptor.stage_out(&path));
                let _ = std::fs::remove_dir_all(&tmp);
                let got = result?;
                if &got != dst {
                    return Err(GlueError::DigestMismatch {
                        expected: expected.to_string(),
                        actual: got.to_string(),
                    });
                }
                Ok(())
            }
        }
    }

    pub fn idle(&self, backend: &str) {
        if let Ok(a) = self.adaptor(backend) {
            a.idle();
        }
    }
}

static TRANSFER_COUNTER: AtomicU64 = AtomicU64::new(0);

fn tempdir_for_transfer() -> Result<std::path::PathBuf, GlueError> {
    let dir = std::env::temp_dir().join(format!(
        "medpipe-transfer-{}-{}",
        std::process::id(),
        TRANSFER_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::create_dir_all(&dir).map_err(|e| GlueError::Backend(e.to_string()))?;
    Ok(dir)
}
