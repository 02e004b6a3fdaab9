//! Runs jobs as OS subprocesses, each in a fresh working directory.

use std::collections::{HashMap, VecDeque};
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::{Adaptor, BackendJobId, GlueError, JobDescription, JobState, JobStatus};
use crate::artifact::{ArtifactError, ArtifactLocator, ArtifactStore};

const DIAGNOSTICS_TAIL: usize = 4096;

struct LocalJob {
    desc: JobDescription,
    status: JobStatus,
}

struct Shared {
    store: ArtifactStore,
    work_root: PathBuf,
    jobs: Mutex<HashMap<u64, LocalJob>>,
    queue: Mutex<VecDeque<u64>>,
    wake: Condvar,
    shutdown: AtomicBool,
}

impl Shared {
    /// Moves a job forward unless it was canceled meanwhile. Returns false if canceled.
    fn advance(&self, id: u64, status: JobStatus) -> bool {
        let mut jobs = self.jobs.lock().unwrap();
        let job = jobs.get_mut(&id).expect("job exists");
        if job.status.state == JobState::Canceled {
            return false;
        }
        job.status = status;
        true
    }

    fn is_canceled(&self, id: u64) -> bool {
        self.jobs.lock().unwrap()[&id].status.state == JobState::Canceled
    }
}

/// Subprocess backend with at most `max_concurrent` jobs running at once.
pub struct LocalAdaptor {
    shared: Arc<Shared>,
    next: AtomicU64,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl LocalAdaptor {
    pub fn new(
        store: ArtifactStore,
        work_root: impl Into<PathBuf>,
        max_concurrent: usize,
    ) -> Result<Self, GlueError> {
        let work_root = work_root.into();
        fs::create_dir_all(&work_root).map_err(|e| GlueError::Backend(e.to_string()))?;
        let shared = Arc::new(Shared {
            store,
            work_root,
            jobs: Mutex::new(HashMap::new()),
            queue: Mutex::new(VecDeque::new()),
            wake: Condvar::new(),
            shutdown: AtomicBool::new(false),
        });
        let workers = (0..max_concurrent.max(1))
            .map(|_| {
                let shared = shared.clone();
                thread::spawn(move || worker(shared))
            })
            .collect();
        Ok(LocalAdaptor {
            shared,
            next: AtomicU64::new(0),
            workers: Mutex::new(workers),
        })
    }
}

impl Drop for LocalAdaptor {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        {
            let _q = self.shared.queue.lock().unwrap();
            self.shared.wake.notify_all();
        }
        for w in self.workers.lock().unwrap().drain(..) {
            let _ = w.join();
        }
    }
}

fn worker(shared: Arc<Shared>) {
    loop {
        let id = {
            let mut q = shared.queue.lock().unwrap();
            loop {
                if shared.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                if let Some(id) = q.pop_front() {
                    break id;
                }
                q = shared.wake.wait(q).unwrap();
            }
        };
        run_job(&shared, id);
    }
}

fn tail(bytes: &[u8]) -> String {
    let start = bytes.len().saturating_sub(DIAGNOSTICS_TAIL);
    String::from_utf8_lossy(&bytes[start..])
        .trim_end()
        .to_string()
}

fn run_job(shared: &Shared, id: u64) {
    let desc = {
        let mut jobs = shared.jobs.lock().unwrap();
        let job = jobs.get_mut(&id).expect("queued job exists");
        if job.status.state == JobState::Canceled {
            return;
        }
        job.status = JobStatus::new(JobState::Staging);
        job.desc.clone()
    };
    let workdir = shared.work_root.join(format!("job-{id}"));
    let outcome = execute(shared, id, &desc, &workdir);
    let _ = fs::remove_dir_all(&workdir);
    if let Some(status) = outcome {
        shared.advance(id, status);
    }
}

/// Returns the terminal status, or `None` if the job was canceled.
fn execute(shared: &Shared, id: u64, desc: &JobDescription, workdir: &Path) -> Option<JobStatus> {
    let fail = |diag: String| Some(JobStatus::finished(JobState::Failed, -1, diag));
    if let Err(e) = fs::create_dir_all(workdir) {
        return fail(format!("cannot create working directory: {e}"));
    }
    for input in &desc.input_files {
        if let Err(e) = shared
            .store
            .copy_to(&input.locator, &workdir.join(&input.name))
        {
            return fail(format!("stage-in of {} failed: {e}", input.locator));
        }
    }
    if !shared.advance(id, JobStatus::new(JobState::Running)) {
        return None;
    }

    let stdout = File::create(workdir.join(".stdout"));
    let stderr = File::create(workdir.join(".stderr"));
    let (Ok(stdout), Ok(stderr)) = (stdout, stderr) else {
        return fail("cannot create log files".into());
    };
    let child = Command::new(&desc.executable)
        .args(&desc.arguments)
        .current_dir(workdir)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .spawn();
    let mut child = match child {
        Ok(c) => c,
        Err(e) => return fail(format!("cannot start `{}`: {e}", desc.executable)),
    };
    let exit = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => {}
            Err(e) => return fail(format!("wait failed: {e}")),
        }
        if shared.is_canceled(id) {
            let _ = child.kill();
            let _ = child.wait();
            return None;
        }
        thread::sleep(Duration::from_millis(2));
    };
    let diagnostics = tail(&fs::read(workdir.join(".stderr")).unwrap_or_default());
    let code = exit.code().unwrap_or(-1);
    if code != 0 {
        return Some(JobStatus::finished(JobState::Failed, code, diagnostics));
    }
    let mut status = JobStatus::finished(JobState::Done, 0, diagnostics);
    for name in &desc.output_files {
        match shared.store.put_file(&workdir.join(name)) {
            Ok(id) => {
                status
                    .outputs
                    .insert(name.clone(), ArtifactLocator::Store(id));
            }
            Err(ArtifactError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
                return Some(JobStatus::finished(
                    JobState::Failed,
                    code,
                    format!("declared output `{name}` was not produced"),
                ));
            }
            Err(e) => return fail(format!("stage-out of `{name}` failed: {e}")),
        }
    }
    Some(status)
}

fn unknown(job: &BackendJobId) -> GlueError {
    GlueError::Backend(format!("local adaptor has no job `{}`", job.0))
}

fn parse_id(job: &BackendJobId) -> Result<u64, GlueError> {
    job.0
        .strip_prefix("local-")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| unknown(job))
}

impl Adaptor for LocalAdaptor {
    fn submit(&self, job: &JobDescription) -> Result<BackendJobId, GlueError> {
        let id = self.next.fetch_add(1, Ordering::Relaxed) + 1;
        self.shared.jobs.lock().unwrap().insert(
            id,
            LocalJob {
                desc: job.clone(),
                status: JobStatus::new(JobState::Pending),
            },
        );
        let mut q = self.shared.queue.lock().unwrap();
        q.push_back(id);
        self.shared.wake.notify_one();
        Ok(BackendJobId(format!("local-{id}")))
    }

    fn poll(&self, job: &BackendJobId) -> Result<JobStatus, GlueError> {
        let id = parse_id(job)?;
        let jobs = self.shared.jobs.lock().unwrap();
        jobs.get(&id)
            .map(|j| j.status.clone())
            .ok_or_else(|| unknown(job))
    }

    fn cancel(&self, job: &BackendJobId) -> Result<JobStatus, GlueError> {
        let id = parse_id(job)?;
        let mut jobs = self.shared.jobs.lock().unwrap();
        let j = jobs.get_mut(&id).ok_or_else(|| unknown(job))?;
        if !j.status.state.is_terminal() {
            j.status = JobStatus::new(JobState::Canceled);
        }
        Ok(j.status.clone())
    }

    fn stage_in(&self, src: &ArtifactLocator, dest: &Path) -> Result<(), GlueError> {
        self.shared
            .store
            .copy_to(src, dest)
            .map(|_| ())
            .map_err(|e| match e {
                ArtifactError::Missing(m) => GlueError::SourceMissing(m),
                other => GlueError::Backend(other.to_string()),
            })
    }

    fn stage_out(&self, src: &Path) -> Result<ArtifactLocator, GlueError> {
        self.shared
            .store
            .put_file(src)
            .map(ArtifactLocator::Store)
            .map_err(|e| GlueError::Backend(e.to_string()))
    }
}
