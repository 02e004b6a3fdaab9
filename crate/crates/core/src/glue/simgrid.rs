//! Discrete-event simulation of a grid of sites.
//!
//! Each site runs at most `slots` jobs at once and queues the rest in
//! submission order. A job's runtime is a per-actor tick count (default 1).
//! Virtual time moves only through [`SimGridAdaptor::tick`], or one tick per
//! [`Adaptor::idle`] call when auto-advance is on. Completed jobs get
//! deterministic placeholder outputs stamped with a digest of their command and
//! inputs.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    Adaptor, BackendJobId, GlueError, JobDescription, JobState, JobStatus, LABEL_ACTOR,
    LABEL_ATTEMPT, LABEL_STUDY_INDEX, LABEL_TASK,
};
use crate::artifact::{ArtifactError, ArtifactLocator, ArtifactStore};
use crate::planner::GridView;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub task: String,
    pub attempt: u32,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SimGridConfig {
    pub grid: GridView,
    #[serde(default)]
    pub actor_runtimes: BTreeMap<String, u64>,
    #[serde(default)]
    pub fault_plan: Vec<FaultSpec>,
}

struct SimJob {
    desc: JobDescription,
    site: String,
    status: JobStatus,
    end: Option<u64>,
}

struct SimState {
    clock: u64,
    jobs: BTreeMap<u64, SimJob>,
    queues: BTreeMap<String, VecDeque<u64>>,
    running: BTreeMap<String, BTreeSet<u64>>,
    next: u64,
}

pub struct SimGridAdaptor {
    store: ArtifactStore,
    config: SimGridConfig,
    auto_advance: bool,
    state: Mutex<SimState>,
}

impl SimGridAdaptor {
    pub fn new(store: ArtifactStore, config: SimGridConfig, auto_advance: bool) -> Self {
        let queues = config
            .grid
            .sites
            .iter()
            .map(|s| (s.site_id.clone(), VecDeque::new()))
            .collect();
        let running = config
            .grid
            .sites
            .iter()
            .map(|s| (s.site_id.clone(), BTreeSet::new()))
            .collect();
        SimGridAdaptor {
            store,
            config,
            auto_advance,
            state: Mutex::new(SimState {
                clock: 0,
                jobs: BTreeMap::new(),
                queues,
                running,
                next: 0,
            }),
        }
    }

    pub fn now(&self) -> u64 {
        self.state.lock().unwrap().clock
    }

    /// Jobs currently holding a lane at `site`.
    pub fn running_at(&self, site: &str) -> usize {
        self.state
            .lock()
            .unwrap()
            .running
            .get(site)
            .map_or(0, |r| r.len())
    }

    pub fn slots_of(&self, site: &str) -> usize {
        self.config.grid.site(site).map_or(0, |s| s.slots as usize)
    }

    pub fn sites(&self) -> Vec<String> {
        self.config
            .grid
            .sites
            .iter()
            .map(|s| s.site_id.clone())
            .collect()
    }

    /// Advances virtual time by `n` ticks, one at a time.
    pub fn tick(&self, n: u64) {
        let mut st = self.state.lock().unwrap();
        for _ in 0..n {
            st.clock += 1;
            let now = st.clock;
            let due: Vec<u64> = st
                .jobs
                .iter()
                .filter(|(_, j)| {
                    j.status.state == JobState::Running && j.end.is_some_and(|e| e <= now)
                })
                .map(|(id, _)| *id)
                .collect();
            for id in due {
                self.complete(&mut st, id);
            }
            self.start_queued(&mut st);
        }
    }

    fn runtime(&self, desc: &JobDescription) -> u64 {
        desc.label(LABEL_ACTOR)
            .and_then(|a| {
                let name = a.split('@').next().unwrap_or(a);
                self.config
                    .actor_runtimes
                    .get(a)
                    .or_else(|| self.config.actor_runtimes.get(name))
            })
            .copied()
            .unwrap_or(1)
            .max(1)
    }

    fn faulted(&self, desc: &JobDescription) -> bool {
        let task = desc.label(LABEL_TASK).unwrap_or_default();
        let attempt: u32 = desc
            .label(LABEL_ATTEMPT)
            .and_then(|a| a.parse().ok())
            .unwrap_or(1);
        self.config
            .fault_plan
            .iter()
            .any(|f| f.task == task && f.attempt == attempt)
    }

    fn start_queued(&self, st: &mut SimState) {
        let now = st.clock;
        for site in &self.config.grid.sites {
            loop {
                let busy = st.running[&site.site_id].len();
                if busy >= site.slots as usize {
                    break;
                }
                let Some(id) = st.queues.get_mut(&site.site_id).unwrap().pop_front() else {
                    break;
                };
                let job = st.jobs.get_mut(&id).unwrap();
                if job.status.state != JobState::Pending {
                    continue;
                }
                // staging is instantaneous: inputs only need to exist
                if let Some(missing) = job
                    .desc
                    .input_files
                    .iter()
                    .find(|i| !self.store.exists(&i.locator))
                {
                    job.status = JobStatus::finished(
                        JobState::Failed,
                        -1,
                        format!("stage-in of {} failed: missing", missing.locator),
                    );
                    continue;
                }
                let runtime = self.runtime(&job.desc);
                job.status = JobStatus::new(JobState::Running);
                job.end = Some(now + runtime);
                st.running.get_mut(&site.site_id).unwrap().insert(id);
            }
        }
    }

    fn complete(&self, st: &mut SimState, id: u64) {
        let job = st.jobs.get_mut(&id).unwrap();
        st.running.get_mut(&job.site).unwrap().remove(&id);
        if self.faulted(&job.desc) {
            job.status = JobStatus::finished(JobState::Failed, 1, "injected fault");
            return;
        }
        let mut status = JobStatus::finished(JobState::Done, 0, "");
        let stamp = stamp(&job.desc);
        for name in &job.desc.output_files {
            let body = format!(
                "simgrid placeholder\ntask={}\nstudy_index={}\nfile={}\nstamp={}\n",
                job.desc.label(LABEL_TASK).unwrap_or("-"),
                job.desc.label(LABEL_STUDY_INDEX).unwrap_or("-"),
                name,
                stamp
            );
            match self.store.put_bytes(body.as_bytes()) {
                Ok(aid) => {
                    status
                        .outputs
                        .insert(name.clone(), ArtifactLocator::Store(aid));
                }
                Err(e) => {
                    job.status =
                        JobStatus::finished(JobState::Failed, -1, format!("stage-out failed: {e}"));
                    return;
                }
            }
        }
        job.status = status;
    }
}

fn stamp(desc: &JobDescription) -> String {
    let mut h = Sha256::new();
    h.update(desc.executable.as_bytes());
    for a in &desc.arguments {
        h.update([0x1f]);
        h.update(a.as_bytes());
    }
    for i in &desc.input_files {
        h.update([0x1e]);
        h.update(i.name.as_bytes());
        h.update([0x1f]);
        h.update(i.locator.to_string().as_bytes());
    }
    hex::encode(h.finalize())
}

fn unknown(job: &BackendJobId) -> GlueError {
    GlueError::Backend(format!("simgrid has no job `{}`", job.0))
}

fn parse_id(job: &BackendJobId) -> Result<u64, GlueError> {
    job.0
        .strip_prefix("sim-")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| unknown(job))
}

impl Adaptor for SimGridAdaptor {
    fn submit(&self, job: &JobDescription) -> Result<BackendJobId, GlueError> {
        if self.config.grid.site(&job.site_id).is_none() {
            return Err(GlueError::InvalidJobDescription(format!(
                "site `{}` is not part of the simulated grid",
                job.site_id
            )));
        }
        let mut st = self.state.lock().unwrap();
        st.next += 1;
        let id = st.next;
        st.jobs.insert(
            id,
            SimJob {
                desc: job.clone(),
                site: job.site_id.clone(),
                status: JobStatus::new(JobState::Pending),
                end: None,
            },
        );
        st.queues.get_mut(&job.site_id).unwrap().push_back(id);
        self.start_queued(&mut st);
        Ok(BackendJobId(format!("sim-{id}")))
    }

    fn poll(&self, job: &BackendJobId) -> Result<JobStatus, GlueError> {
        let id = parse_id(job)?;
        let st = self.state.lock().unwrap();
        st.jobs
            .get(&id)
            .map(|j| j.status.clone())
            .ok_or_else(|| unknown(job))
    }

    fn cancel(&self, job: &BackendJobId) -> Result<JobStatus, GlueError> {
        let id = parse_id(job)?;
        let mut st = self.state.lock().unwrap();
        let j = st.jobs.get_mut(&id).ok_or_else(|| unknown(job))?;
        if j.status.state.is_terminal() {
            return Ok(j.status.clone());
        }
        j.status = JobStatus::new(JobState::Canceled);
        let site = j.site.clone();
        let status = j.status.clone();
        st.running.get_mut(&site).unwrap().remove(&id);
        self.start_queued(&mut st);
        Ok(status)
    }

    fn stage_in(&self, src: &ArtifactLocator, dest: &Path) -> Result<(), GlueError> {
        self.store
            .copy_to(src, dest)
            .map(|_| ())
            .map_err(|e| match e {
                ArtifactError::Missing(m) => GlueError::SourceMissing(m),
                other => GlueError::Backend(other.to_string()),
            })
    }

    fn stage_out(&self, src: &Path) -> Result<ArtifactLocator, GlueError> {
        self.store
            .put_file(src)
            .map(ArtifactLocator::Store)
            .map_err(|e| GlueError::Backend(e.to_string()))
    }

    fn idle(&self) {
        if self.auto_advance {
            self.tick(1);
        } else {
            std::thread::sleep(std::time::Duration::from_millis(1));
        }
    }
}
