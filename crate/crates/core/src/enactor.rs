//! Drives an execution plan through the glue layer.
//!
//! Stages run one after another. Within a stage every job (one per task, or
//! one per study member for fanned-out tasks) is submitted before any is
//! awaited. Failed attempts are resubmitted to the same site until the retry
//! limit is spent. Every state change and every produced artifact is recorded
//! in the provenance log before [`Execution::run`] returns.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{ArtifactError, ArtifactId, ArtifactLocator, ArtifactStore};
use crate::catalog::{Catalog, CatalogError};
use crate::glue::{
    Glue, GlueError, JobDescription, JobHandle, JobState, JobStatus, StagedInput, LABEL_ACTOR,
    LABEL_ATTEMPT, LABEL_EXECUTION, LABEL_STAGE, LABEL_STUDY_INDEX, LABEL_TASK,
};
use crate::pipeline::template::{self, Bindings, TemplateError};
use crate::pipeline::{Pipeline, PortRef};
use crate::planner::{check_plan, ExecutionPlan};
use crate::provenance::{
    ArtifactRecord, Classification, EventBody, NewEvent, ProducedBy, ProvError, ProvenanceEvent,
    ProvenanceStore, TaskTransition,
};

pub const DEFAULT_RETRY_LIMIT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecStatus {
    Succeeded,
    Failed,
    Canceled,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OutputEntry {
    pub task_id: String,
    pub port: String,
    pub study_index: Option<u32>,
    pub artifact_id: ArtifactId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub task_id: String,
    pub study_index: Option<u32>,
    pub diagnostics: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub execution_id: String,
    pub plan_id: String,
    pub status: ExecStatus,
    /// Sorted by (task, port, study index).
    pub outputs: Vec<OutputEntry>,
    pub failure: Option<Failure>,
}

impl ExecutionResult {
    pub fn output(&self, task: &str, port: &str, study_index: Option<u32>) -> Option<&ArtifactId> {
        self.outputs
            .iter()
            .find(|o| o.task_id == task && o.port == port && o.study_index == study_index)
            .map(|o| &o.artifact_id)
    }
}

#[derive(Debug, Error)]
pub enum EnactError {
    #[error("task `{task_id}` failed after exhausting retries: {diagnostics}")]
    EnactmentFailed {
        task_id: String,
        study_index: Option<u32>,
        diagnostics: String,
        result: Box<ExecutionResult>,
    },
    #[error("execution `{}` was canceled", result.execution_id)]
    Canceled { result: Box<ExecutionResult> },
    #[error("execution `{0}` is not running here")]
    UnknownExecution(String),
    #[error("unknown plan `{0}`")]
    UnknownPlan(String),
    #[error("plan does not fit the pipeline: {0}")]
    InconsistentPlan(String),
    #[error("`{0}` is not an output port")]
    UnknownPort(String),
    #[error("backend `{0}` is not registered")]
    UnknownBackend(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Glue(#[from] GlueError),
    #[error(transparent)]
    Provenance(#[from] ProvError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("command of task `{task}`: {source}")]
    Template { task: String, source: TemplateError },
}

impl EnactError {
    /// The final result, for errors that come with one.
    pub fn result(&self) -> Option<&ExecutionResult> {
        match self {
            EnactError::EnactmentFailed { result, .. } | EnactError::Canceled { result } => {
                Some(result)
            }
            _ => None,
        }
    }
}

/// PERSISTENT when nothing consumes the port or the document marks it `persist`.
pub fn classify_artifact(
    task_id: &str,
    port: &str,
    p: &Pipeline,
) -> Result<Classification, EnactError> {
    let unknown = || EnactError::UnknownPort(format!("{task_id}.{port}"));
    let actor = p.actor_of(task_id).ok_or_else(unknown)?;
    if !actor.has_output(port) {
        return Err(unknown());
    }
    let task = p.task(task_id).ok_or_else(unknown)?;
    let consumed = p
        .edges
        .iter()
        .any(|e| e.from.task == task_id && e.from.port == port);
    if !consumed || task.persist.iter().any(|q| q == port) {
        Ok(Classification::Persistent)
    } else {
        Ok(Classification::Transitory)
    }
}

/// Fan-out width per task: `Some(n)` for tasks that run once per study
/// member, `None` for tasks that run once.
pub fn fan_out(
    p: &Pipeline,
    plan: &ExecutionPlan,
) -> Result<BTreeMap<String, Option<usize>>, EnactError> {
    let order = p
        .topological_order()
        .ok_or_else(|| EnactError::InconsistentPlan("pipeline has a cycle".into()))?;
    let mut width: BTreeMap<String, Option<usize>> = BTreeMap::new();
    for t in order {
        let task = p.task(&t).expect("ordered tasks exist");
        let mut w: Option<usize> = None;
        let mut merge = |n: usize, why: String| -> Result<(), EnactError> {
            match w {
                Some(m) if m != n => Err(EnactError::InconsistentPlan(format!(
                    "task `{t}` fans out over {m} and {n} items ({why})"
                ))),
                _ => {
                    w = Some(n);
                    Ok(())
                }
            }
        };
        for port in p.study_inputs.iter().filter(|s| s.task == t) {
            let members = plan.study_fanout.get(&port.to_string()).ok_or_else(|| {
                EnactError::InconsistentPlan(format!("no study members for `{port}`"))
            })?;
            merge(members.len(), format!("study input {port}"))?;
        }
        for e in p.edges_into(&t) {
            if task.gather.contains(&e.to.port) {
                continue;
            }
            if let Some(n) = width[&e.from.task] {
                merge(n, format!("edge {e}"))?;
            }
        }
        width.insert(t.clone(), w);
    }
    Ok(width)
}

#[derive(Clone)]
pub struct EnactContext {
    pub glue: Arc<Glue>,
    pub prov: Arc<ProvenanceStore>,
    pub catalog: Arc<Catalog>,
    pub store: ArtifactStore,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnactOptions {
    pub backend: String,
    pub retry_limit: u32,
}

impl Default for EnactOptions {
    fn default() -> Self {
        EnactOptions {
            backend: "local".into(),
            retry_limit: DEFAULT_RETRY_LIMIT,
        }
    }
}

type LiveMap = Arc<Mutex<HashMap<String, Arc<AtomicBool>>>>;

/// Tracks live executions so they can be canceled.
#[derive(Clone, Default)]
pub struct Enactor {
    live: LiveMap,
}

impl Enactor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records EXEC_STARTED and returns the execution, ready to [`run`](Execution::run).
    /// The plan is recorded first if the log does not have it yet.
    pub fn begin(
        &self,
        ctx: &EnactContext,
        plan: &ExecutionPlan,
        p: &Pipeline,
        opts: &EnactOptions,
    ) -> Result<Execution, EnactError> {
        check_plan(plan, p).map_err(EnactError::InconsistentPlan)?;
        if !ctx.glue.has_backend(&opts.backend) {
            return Err(EnactError::UnknownBackend(opts.backend.clone()));
        }
        let widths = fan_out(p, plan)?;
        let study = import_study_inputs(ctx, plan)?;
        ctx.prov.record_if(|s, _, _| {
            Ok::<_, ProvError>(s.plan(&plan.plan_id).is_none().then(|| {
                NewEvent::global(EventBody::PlanCreated {
                    plan: plan.clone(),
                    pipeline: p.clone(),
                })
            }))
        })?;
        let started = ctx.prov.record_with(|seq, _| {
            Ok::<_, ProvError>(NewEvent::for_execution(
                format!("exec-{seq:06}"),
                EventBody::ExecStarted {
                    plan_id: plan.plan_id.clone(),
                    pipeline_id: p.id.clone(),
                    backend: opts.backend.clone(),
                    retry_limit: opts.retry_limit,
                },
            ))
        })?;
        let id = started.execution_id.clone().expect("execution event");
        let cancel = Arc::new(AtomicBool::new(false));
        self.live.lock().unwrap().insert(id.clone(), cancel.clone());
        Ok(Execution {
            id,
            ctx: ctx.clone(),
            plan: plan.clone(),
            pipeline: p.clone(),
            opts: opts.clone(),
            widths,
            study,
            cancel,
            live: self.live.clone(),
            started,
        })
    }

    /// Begins and runs to completion.
    pub fn enact(
        &self,
        ctx: &EnactContext,
        plan: &ExecutionPlan,
        p: &Pipeline,
        opts: &EnactOptions,
        observer: &mut dyn FnMut(&ProvenanceEvent),
    ) -> Result<ExecutionResult, EnactError> {
        self.begin(ctx, plan, p, opts)?.run(observer)
    }

    /// Asks a live execution to stop: no further stage starts and running
    /// jobs are canceled.
    pub fn cancel_execution(&self, execution_id: &str) -> Result<(), EnactError> {
        match self.live.lock().unwrap().get(execution_id) {
            Some(flag) => {
                flag.store(true, Ordering::SeqCst);
                Ok(())
            }
            None => Err(EnactError::UnknownExecution(execution_id.to_string())),
        }
    }

    pub fn is_live(&self, execution_id: &str) -> bool {
        self.live.lock().unwrap().contains_key(execution_id)
    }
}

/// Copies study payloads into the artifact store and records them as
/// external artifacts. Returns study input port to member artifacts.
fn import_study_inputs(
    ctx: &EnactContext,
    plan: &ExecutionPlan,
) -> Result<BTreeMap<String, Vec<ArtifactId>>, EnactError> {
    let snapshot = ctx.catalog.snapshot()?;
    let mut out = BTreeMap::new();
    for (port, members) in &plan.study_fanout {
        let mut ids = Vec::with_capacity(members.len());
        for rec in snapshot.resolve(members)? {
            let id = match &rec.payload_ref {
                ArtifactLocator::Store(id) if ctx.store.contains(id) => id.clone(),
                ArtifactLocator::Store(id) => {
                    return Err(ArtifactError::Missing(id.to_string()).into())
                }
                ArtifactLocator::File(path) => ctx.store.put_file(path)?,
            };
            ctx.prov.import_external(&ctx.store, &id)?;
            ids.push(id);
        }
        out.insert(port.clone(), ids);
    }
    Ok(out)
}

struct Job {
    task: String,
    index: Option<u32>,
    site: String,
    desc: JobDescription,
    inputs: Vec<ArtifactId>,
    outputs: Vec<(String, String)>,
    attempt: u32,
    handle: Option<JobHandle>,
    last: Option<JobState>,
    finished: bool,
}

type OutputKey = (String, String, Option<u32>);

pub struct Execution {
    id: String,
    ctx: EnactContext,
    plan: ExecutionPlan,
    pipeline: Pipeline,
    opts: EnactOptions,
    widths: BTreeMap<String, Option<usize>>,
    study: BTreeMap<String, Vec<ArtifactId>>,
    cancel: Arc<AtomicBool>,
    live: LiveMap,
    started: ProvenanceEvent,
}

impl Drop for Execution {
    fn drop(&mut self) {
        self.live.lock().unwrap().remove(&self.id);
    }
}

struct Driver<'a> {
    exec: &'a Execution,
    observer: &'a mut dyn FnMut(&ProvenanceEvent),
    produced: BTreeMap<OutputKey, ArtifactId>,
    failure: Option<Failure>,
    canceled: bool,
}

impl Execution {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn plan(&self) -> &ExecutionPlan {
        &self.plan
    }

    pub fn run(
        self,
        observer: &mut dyn FnMut(&ProvenanceEvent),
    ) -> Result<ExecutionResult, EnactError> {
        observer(&self.started);
        let mut d = Driver {
            exec: &self,
            observer,
            produced: BTreeMap::new(),
            failure: None,
            canceled: false,
        };
        for (k, stage) in self.plan.stages.iter().enumerate() {
            if self.cancel.load(Ordering::SeqCst) {
                d.canceled = true;
            }
            if d.canceled || d.failure.is_some() {
                break;
            }
            d.run_stage(k, stage)?;
        }
        let status = if d.canceled {
            ExecStatus::Canceled
        } else if d.failure.is_some() {
            ExecStatus::Failed
        } else {
            ExecStatus::Succeeded
        };
        let result = ExecutionResult {
            execution_id: self.id.clone(),
            plan_id: self.plan.plan_id.clone(),
            status,
            outputs: d
                .produced
                .iter()
                .map(|((task, port, idx), id)| OutputEntry {
                    task_id: task.clone(),
                    port: port.clone(),
                    study_index: *idx,
                    artifact_id: id.clone(),
                })
                .collect(),
            failure: d.failure.clone(),
        };
        d.emit(NewEvent::for_execution(
            &self.id,
            EventBody::ExecEnded {
                result: result.clone(),
            },
        ))?;
        match (status, &result.failure) {
            (ExecStatus::Canceled, _) => Err(EnactError::Canceled {
                result: Box::new(result),
            }),
            (ExecStatus::Failed, Some(f)) => Err(EnactError::EnactmentFailed {
                task_id: f.task_id.clone(),
                study_index: f.study_index,
                diagnostics: f.diagnostics.clone(),
                result: Box::new(result),
            }),
            _ => Ok(result),
        }
    }
}

fn input_name(port: &str, k: Option<usize>) -> String {
    match k {
        Some(k) => format!("in_{port}_{k}"),
        None => format!("in_{port}"),
    }
}

impl Driver<'_> {
    fn emit(&mut self, e: NewEvent) -> Result<(), EnactError> {
        let seq = self.exec.ctx.prov.record(e)?;
        let ev = self
            .exec
            .ctx
            .prov
            .read(|s| s.events()[seq as usize - 1].clone())?;
        (self.observer)(&ev);
        Ok(())
    }

    fn prepare(&self, stage: usize, task_id: &str, index: Option<u32>) -> Result<Job, EnactError> {
        let exec = self.exec;
        let p = &exec.pipeline;
        let task = p.task(task_id).expect("planned task exists");
        let actor = p.actor_of(task_id).expect("validated actor");
        let mut bindings = Bindings {
            params: task.params.clone(),
            ..Bindings::default()
        };
        let mut staged = Vec::new();
        let mut inputs = Vec::new();
        let mut stage_one =
            |port: &str, k: Option<usize>, id: &ArtifactId, names: &mut Vec<String>| {
                let name = input_name(port, k);
                staged.push(StagedInput {
                    locator: ArtifactLocator::Store(id.clone()),
                    name: name.clone(),
                });
                inputs.push(id.clone());
                names.push(name);
            };
        for port in &actor.inputs {
            let pref = PortRef::new(task_id, port.as_str());
            let mut names = Vec::new();
            if p.is_study_fed(&pref) {
                let members = &exec.study[&pref.to_string()];
                let i = index.expect("study-fed tasks are fanned") as usize;
                stage_one(port, None, &members[i], &mut names);
            } else if let Some(edge) = p.edges_into(task_id).find(|e| e.to.port == *port) {
                let producer = &edge.from;
                let width = exec.widths[&producer.task];
                let key = |idx: Option<u32>| (producer.task.clone(), producer.port.clone(), idx);
                let missing = || {
                    EnactError::InconsistentPlan(format!(
                        "`{producer}` produced nothing for `{pref}`"
                    ))
                };
                match width {
                    Some(n) if task.gather.contains(port) => {
                        for k in 0..n {
                            let id = self
                                .produced
                                .get(&key(Some(k as u32)))
                                .ok_or_else(missing)?
                                .clone();
                            stage_one(port, Some(k), &id, &mut names);
                        }
                    }
                    Some(_) => {
                        let id = self.produced.get(&key(index)).ok_or_else(missing)?.clone();
                        stage_one(port, None, &id, &mut names);
                    }
                    None => {
                        let id = self.produced.get(&key(None)).ok_or_else(missing)?.clone();
                        stage_one(port, None, &id, &mut names);
                    }
                }
            } else if let Some(lit) = task.params.get(port) {
                names.push(lit.clone());
            }
            bindings.inputs.insert(port.clone(), names);
        }
        let outputs: Vec<(String, String)> = actor
            .outputs
            .iter()
            .map(|o| (o.clone(), format!("out_{o}")))
            .collect();
        bindings.outputs = outputs.iter().cloned().collect();
        let argv =
            template::expand(&actor.command, &bindings).map_err(|source| EnactError::Template {
                task: task_id.to_string(),
                source,
            })?;
        let site = exec.plan.assignments[task_id].clone();
        let mut labels = BTreeMap::new();
        labels.insert(LABEL_TASK.to_string(), task_id.to_string());
        labels.insert(LABEL_ATTEMPT.to_string(), "1".to_string());
        labels.insert(LABEL_STAGE.to_string(), stage.to_string());
        labels.insert(LABEL_ACTOR.to_string(), task.actor.to_string());
        labels.insert(LABEL_EXECUTION.to_string(), exec.id.clone());
        if let Some(i) = index {
            labels.insert(LABEL_STUDY_INDEX.to_string(), i.to_string());
        }
        let mut inputs_dedup = Vec::new();
        let mut seen = BTreeSet::new();
        for i in inputs {
            if seen.insert(i.clone()) {
                inputs_dedup.push(i);
            }
        }
        let desc = JobDescription {
            executable: argv[0].clone(),
            arguments: argv[1..].to_vec(),
            input_files: staged,
            output_files: outputs.iter().map(|(_, n)| n.clone()).collect(),
            side_effect_free: outputs.is_empty(),
            site_id: site.clone(),
            labels,
        };
        Ok(Job {
            task: task_id.to_string(),
            index,
            site,
            desc,
            inputs: inputs_dedup,
            outputs,
            attempt: 1,
            handle: None,
            last: None,
            finished: false,
        })
    }

    fn transition(
        &mut self,
        job: &Job,
        to: JobState,
        status: Option<&JobStatus>,
    ) -> Result<(), EnactError> {
        let terminal = to.is_terminal();
        self.emit(NewEvent::for_execution(
            &self.exec.id,
            EventBody::TaskTransition(TaskTransition {
                task_id: job.task.clone(),
                study_index: job.index,
                attempt: job.attempt,
                from: job.last,
                to,
                site_id: job.site.clone(),
                exit_code: status.filter(|_| terminal).and_then(|s| s.exit_code),
                diagnostics: status
                    .filter(|_| terminal)
                    .map(|s| s.diagnostics.clone())
                    .unwrap_or_default(),
            }),
        ))
    }

    fn submit(&mut self, job: &mut Job) -> Result<(), EnactError> {
        job.desc
            .labels
            .insert(LABEL_ATTEMPT.to_string(), job.attempt.to_string());
        job.last = None;
        let handle = self
            .exec
            .ctx
            .glue
            .submit(&job.desc, &self.exec.opts.backend)?;
        job.handle = Some(handle);
        self.transition(job, JobState::Pending, None)?;
        job.last = Some(JobState::Pending);
        Ok(())
    }

    /// Records the steps from the last seen state to `status` and reacts to
    /// terminal states.
    fn observe(&mut self, job: &mut Job, status: JobStatus) -> Result<(), EnactError> {
        let from = job.last.expect("submitted");
        let Some(steps) = from.steps_to(status.state) else {
            return Ok(());
        };
        for s in steps {
            self.transition(job, s, Some(&status))?;
            job.last = Some(s);
        }
        match status.state {
            JobState::Done => {
                self.record_outputs(job, &status)?;
                job.finished = true;
            }
            JobState::Failed if job.attempt <= self.exec.opts.retry_limit && !self.canceled => {
                job.attempt += 1;
                self.submit(job)?;
            }
            JobState::Failed => {
                job.finished = true;
                if self.failure.is_none() {
                    self.failure = Some(Failure {
                        task_id: job.task.clone(),
                        study_index: job.index,
                        diagnostics: status.diagnostics.clone(),
                    });
                }
            }
            JobState::Canceled => job.finished = true,
            _ => {}
        }
        Ok(())
    }

    fn record_outputs(&mut self, job: &Job, status: &JobStatus) -> Result<(), EnactError> {
        for (port, name) in &job.outputs {
            let id = match status.outputs.get(name) {
                Some(ArtifactLocator::Store(id)) => id.clone(),
                Some(ArtifactLocator::File(path)) => self.exec.ctx.store.put_file(path)?,
                None => {
                    return Err(EnactError::Glue(GlueError::Backend(format!(
                        "job for `{}` finished without output `{name}`",
                        job.task
                    ))))
                }
            };
            let record = ArtifactRecord {
                artifact_id: id.clone(),
                produced_by: ProducedBy::Task {
                    execution_id: self.exec.id.clone(),
                    task_id: job.task.clone(),
                    port: port.clone(),
                    study_index: job.index,
                },
                classification: classify_artifact(&job.task, port, &self.exec.pipeline)?,
                size_bytes: self.exec.ctx.store.size_of(&id)?,
            };
            self.emit(NewEvent::for_execution(
                &self.exec.id,
                EventBody::ArtifactCreated {
                    artifact: record,
                    inputs: job.inputs.clone(),
                },
            ))?;
            self.produced
                .insert((job.task.clone(), port.clone(), job.index), id);
        }
        Ok(())
    }

    fn run_stage(&mut self, k: usize, stage: &[String]) -> Result<(), EnactError> {
        let mut jobs = Vec::new();
        for task in stage {
            match self.exec.widths[task] {
                Some(n) => {
                    for i in 0..n {
                        jobs.push(self.prepare(k, task, Some(i as u32))?);
                    }
                }
                None => jobs.push(self.prepare(k, task, None)?),
            }
        }
        for job in &mut jobs {
            self.submit(job)?;
        }
        let glue = self.exec.ctx.glue.clone();
        loop {
            if !self.canceled && self.exec.cancel.load(Ordering::SeqCst) {
                self.canceled = true;
                for job in jobs.iter_mut().filter(|j| !j.finished) {
                    let status = glue.cancel(job.handle.as_ref().expect("submitted"))?;
                    self.observe(job, status)?;
                }
            }
            let mut progress = false;
            for job in jobs.iter_mut().filter(|j| !j.finished) {
                let status = glue.status(job.handle.as_ref().expect("submitted"))?;
                if Some(status.state) != job.last {
                    progress = true;
                    self.observe(job, status)?;
                }
            }
            if jobs.iter().all(|j| j.finished) {
                return Ok(());
            }
            if !progress {
                glue.idle(&self.exec.opts.backend);
            }
        }
    }
}
