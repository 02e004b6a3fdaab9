//! Request/response surface shared by the CLI and the HTTP gateway.
//!
//! Every operation reads and writes only the shared stores, so any number of
//! [`Service`] instances over the same directory answer reads identically.
//! Bodies are rendered with [`render`]; the gateway sends exactly those bytes
//! and the CLI prints them under `--json`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::anonymize::{self, AnonymizeError, Policy, PseudonymMap};
use crate::artifact::{ArtifactError, ArtifactId, ArtifactStore};
use crate::catalog::{self, Catalog, CatalogError, HomogeneityReport, ImageRecord, StudySet};
use crate::enactor::{EnactContext, EnactError, EnactOptions, Enactor, ExecutionResult};
use crate::glue::config::BackendConfig;
use crate::glue::{GlueError, JobState};
use crate::pipeline::{self, ParseError, Pipeline, ValidationReport};
use crate::planner::{self, ExecutionPlan, GridView, PlanError};
use crate::provenance::{
    Clock, EventBody, EventFilter, ExecutionState, ExecutionSummary, LineageGraph, NewEvent,
    ProvError, ProvenanceEvent, ProvenanceStore,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    InvalidRequest,
    Unauthorized,
    NotFound,
    InvalidDocument,
    ValidationFailed,
    InvalidPredicate,
    InvalidPolicy,
    InvalidGrid,
    InvalidPlan,
    InvalidRecord,
    NoEligibleSite,
    EmptyStudySet,
    Conflict,
    EnactmentFailed,
    Canceled,
    Storage,
    Internal,
}

impl ErrorCode {
    pub fn http_status(self) -> u16 {
        use ErrorCode::*;
        match self {
            InvalidRequest => 400,
            Unauthorized => 401,
            NotFound => 404,
            NoEligibleSite | Conflict | Canceled => 409,
            InvalidDocument | ValidationFailed | InvalidPredicate | InvalidPolicy | InvalidGrid
            | InvalidPlan | InvalidRecord | EmptyStudySet => 422,
            EnactmentFailed | Storage | Internal => 500,
        }
    }

    /// CLI convention: 2 for usage errors, 1 for everything the domain rejects.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCode::InvalidRequest => 2,
            _ => 1,
        }
    }
}

/// Error body: `{code, message, detail}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub detail: Value,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError {
            code,
            message: message.into(),
            detail: Value::Null,
        }
    }

    pub fn with_detail(mut self, detail: impl Serialize) -> Self {
        self.detail = serde_json::to_value(detail).unwrap_or(Value::Null);
        self
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(ErrorCode::InvalidRequest, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(ErrorCode::NotFound, message)
    }

    pub fn http_status(&self) -> u16 {
        self.code.http_status()
    }

    pub fn exit_code(&self) -> i32 {
        self.code.exit_code()
    }
}

impl fmt::Display for ApiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

impl From<ParseError> for ApiError {
    fn from(e: ParseError) -> Self {
        ApiError::new(ErrorCode::InvalidDocument, e.to_string())
    }
}

impl From<ProvError> for ApiError {
    fn from(e: ProvError) -> Self {
        match e {
            ProvError::UnknownArtifact(_) => ApiError::not_found(e.to_string()),
            ProvError::IllegalTransition { .. } | ProvError::InvalidEvent(_) => {
                ApiError::new(ErrorCode::Conflict, e.to_string())
            }
            ProvError::Storage(_) | ProvError::Corrupt { .. } => {
                ApiError::new(ErrorCode::Storage, e.to_string())
            }
        }
    }
}

impl From<CatalogError> for ApiError {
    fn from(e: CatalogError) -> Self {
        let code = match &e {
            CatalogError::DuplicateImage(_) => ErrorCode::Conflict,
            CatalogError::InvalidRecord { .. } => ErrorCode::InvalidRecord,
            CatalogError::UnknownMember(_) => ErrorCode::Conflict,
            CatalogError::Predicate(_) => ErrorCode::InvalidPredicate,
            CatalogError::Corrupt { .. } | CatalogError::Io(_) => ErrorCode::Storage,
        };
        ApiError::new(code, e.to_string())
    }
}

impl From<ArtifactError> for ApiError {
    fn from(e: ArtifactError) -> Self {
        let code = match &e {
            ArtifactError::Missing(_) => ErrorCode::NotFound,
            ArtifactError::InvalidId(_) | ArtifactError::InvalidLocator(_) => {
                ErrorCode::InvalidRequest
            }
            ArtifactError::Io(_) => ErrorCode::Storage,
        };
        ApiError::new(code, e.to_string())
    }
}

impl From<GlueError> for ApiError {
    fn from(e: GlueError) -> Self {
        let code = match &e {
            GlueError::UnknownBackend(_) | GlueError::InvalidJobDescription(_) => {
                ErrorCode::InvalidRequest
            }
            GlueError::UnknownHandle(_) | GlueError::SourceMissing(_) => ErrorCode::NotFound,
            _ => ErrorCode::Internal,
        };
        ApiError::new(code, e.to_string())
    }
}

impl From<PlanError> for ApiError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::InvalidPipeline(report) => {
                ApiError::new(ErrorCode::ValidationFailed, "pipeline is not valid")
                    .with_detail(report)
            }
            PlanError::NoEligibleSite(ref task) => {
                let task = task.clone();
                ApiError::new(ErrorCode::NoEligibleSite, e.to_string())
                    .with_detail(serde_json::json!({ "task_id": task }))
            }
            PlanError::EmptyStudySet => ApiError::new(ErrorCode::EmptyStudySet, e.to_string()),
            PlanError::InvalidGrid(_) => ApiError::new(ErrorCode::InvalidGrid, e.to_string()),
        }
    }
}

impl From<AnonymizeError> for ApiError {
    fn from(e: AnonymizeError) -> Self {
        match e {
            AnonymizeError::InvalidPolicy(_) => {
                ApiError::new(ErrorCode::InvalidPolicy, e.to_string())
            }
            AnonymizeError::UnknownStudySet(_) => ApiError::not_found(e.to_string()),
            AnonymizeError::Catalog(c) => c.into(),
            AnonymizeError::Provenance(p) => p.into(),
        }
    }
}

impl From<EnactError> for ApiError {
    fn from(e: EnactError) -> Self {
        let msg = e.to_string();
        match e {
            EnactError::EnactmentFailed { result, .. } => {
                ApiError::new(ErrorCode::EnactmentFailed, msg).with_detail(*result)
            }
            EnactError::Canceled { result } => {
                ApiError::new(ErrorCode::Canceled, msg).with_detail(*result)
            }
            EnactError::UnknownExecution(_) | EnactError::UnknownPlan(_) => {
                ApiError::not_found(msg)
            }
            EnactError::InconsistentPlan(_)
            | EnactError::UnknownPort(_)
            | EnactError::Template { .. } => ApiError::new(ErrorCode::InvalidPlan, msg),
            EnactError::UnknownBackend(_) => ApiError::bad_request(msg),
            EnactError::Catalog(c) => c.into(),
            EnactError::Glue(g) => g.into(),
            EnactError::Provenance(p) => p.into(),
            EnactError::Artifact(a) => a.into(),
        }
    }
}

/// Pretty JSON plus a trailing newline: the canonical body bytes.
pub fn render<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("response serializes");
    s.push('\n');
    s
}

/// One human-readable line per task transition, `None` for other events.
pub fn describe_event(e: &ProvenanceEvent) -> Option<String> {
    let EventBody::TaskTransition(t) = &e.body else {
        return None;
    };
    let instance = match t.study_index {
        Some(i) => format!("{}[{i}]", t.task_id),
        None => t.task_id.clone(),
    };
    let from = t.from.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
    let mut line = format!(
        "#{:<5} {instance} attempt {} {from} -> {} @{}",
        e.seq, t.attempt, t.to, t.site_id
    );
    if let Some(code) = t.exit_code {
        line.push_str(&format!(" exit={code}"));
    }
    if !t.diagnostics.is_empty() && t.to == JobState::Failed {
        line.push_str(&format!(
            " ({})",
            t.diagnostics.lines().next().unwrap_or_default()
        ));
    }
    Some(line)
}

fn default_owner() -> String {
    "default".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisterResponse {
    pub pipeline_id: String,
    /// False when an identical pipeline was already registered.
    pub registered: bool,
    pub report: ValidationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyQueryRequest {
    pub predicate: String,
    #[serde(default = "default_owner")]
    pub owner: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomogeneityRequest {
    pub fields: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnonymizeRequest {
    pub policy: Policy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnonymizeResponse {
    pub study_set: StudySet,
    /// Original to token per pseudonymized tag, for escrow by the caller.
    pub pseudonyms: PseudonymMap,
}

/// Either an inline pipeline document or the id of a registered pipeline.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline_id: Option<String>,
    /// Falls back to the service's configured grid view.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub studyset_id: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRequest {
    pub plan_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_limit: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionStarted {
    pub execution_id: String,
    pub status: ExecutionState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestResponse {
    pub ingested: usize,
}

/// Where the shared stores live and how backends are built.
///
/// ```json
/// {"data_dir": "/srv/medpipe",
///  "clock": "system",
///  "grid_view_file": "grid.json",
///  "backends": {"default_backend": "local", "backends": {"local": {}}}}
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifacts: Option<PathBuf>,
    #[serde(default)]
    pub clock: Clock,
    /// Default grid for plan requests that carry none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_view_file: Option<PathBuf>,
    #[serde(default)]
    pub backends: BackendConfig,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            data_dir: data_dir.into(),
            catalog: None,
            provenance: None,
            artifacts: None,
            clock: Clock::System,
            grid: None,
            grid_view_file: None,
            backends: BackendConfig::default(),
        }
    }

    pub fn catalog_path(&self) -> PathBuf {
        self.catalog
            .clone()
            .unwrap_or_else(|| self.data_dir.join("catalog.jsonl"))
    }

    pub fn provenance_path(&self) -> PathBuf {
        self.provenance
            .clone()
            .unwrap_or_else(|| self.data_dir.join("provenance.jsonl"))
    }

    pub fn artifacts_path(&self) -> PathBuf {
        self.artifacts
            .clone()
            .unwrap_or_else(|| self.data_dir.join("artifacts"))
    }

    /// Makes relative paths absolute against `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            Some(&mut self.data_dir),
            self.catalog.as_mut(),
            self.provenance.as_mut(),
            self.artifacts.as_mut(),
            self.grid_view_file.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(local) = self.backends.backends.local.as_mut() {
            if let Some(w) = local.work_dir.as_mut() {
                if w.is_relative() {
                    *w = base.join(&*w);
                }
            }
        }
        if let Some(sim) = self.backends.backends.simgrid.as_mut() {
            if let Some(g) = sim.grid_view_file.as_mut() {
                if g.is_relative() {
                    *g = base.join(&*g);
                }
            }
        }
    }
}

/// Handles on the shared stores plus this instance's backends.
#[derive(Clone)]
pub struct Service {
    ctx: EnactContext,
    enactor: Enactor,
    grid: Option<GridView>,
    default_backend: String,
}

fn storage(e: impl fmt::Display) -> ApiError {
    ApiError::new(ErrorCode::Storage, e.to_string())
}

impl Service {
    pub fn open(cfg: &ServiceConfig) -> Result<Self, ApiError> {
        std::fs::create_dir_all(&cfg.data_dir).map_err(storage)?;
        let store = ArtifactStore::open(cfg.artifacts_path()).map_err(storage)?;
        let catalog = Catalog::open(cfg.catalog_path()).map_err(storage)?;
        let prov = ProvenanceStore::open(cfg.provenance_path(), cfg.clock).map_err(storage)?;
        let glue = cfg.backends.build(&store, &cfg.data_dir)?;
        let grid = match (&cfg.grid, &cfg.grid_view_file) {
            (Some(g), _) => Some(g.clone()),
            (None, Some(f)) => Some(read_grid(f)?),
            (None, None) => cfg.backends.simgrid_view(&cfg.data_dir)?,
        };
        Ok(Service {
            ctx: EnactContext {
                glue: Arc::new(glue),
                prov: Arc::new(prov),
                catalog: Arc::new(catalog),
                store,
            },
            enactor: Enactor::new(),
            grid,
            default_backend: cfg.backends.default_backend.clone(),
        })
    }

    pub fn from_context(
        ctx: EnactContext,
        grid: Option<GridView>,
        default_backend: impl Into<String>,
    ) -> Self {
        Service {
            ctx,
            enactor: Enactor::new(),
            grid,
            default_backend: default_backend.into(),
        }
    }

    pub fn context(&self) -> &EnactContext {
        &self.ctx
    }

    pub fn enactor(&self) -> &Enactor {
        &self.enactor
    }

    pub fn health(&self) -> Value {
        serde_json::json!({ "status": "ok" })
    }

    pub fn validate(&self, doc: &str) -> Result<ValidationReport, ApiError> {
        Ok(pipeline::validate(&pipeline::parse_pipeline(doc)?))
    }

    /// Parses, validates and records the pipeline unless an identical one is
    /// already registered.
    pub fn register_pipeline(&self, doc: &str) -> Result<RegisterResponse, ApiError> {
        let p = pipeline::parse_pipeline(doc)?;
        let report = pipeline::validate(&p);
        if !report.ok {
            return Err(
                ApiError::new(ErrorCode::ValidationFailed, "pipeline is not valid")
                    .with_detail(report),
            );
        }
        let registered = self.ensure_registered(&p)?;
        Ok(RegisterResponse {
            pipeline_id: p.id,
            registered,
            report,
        })
    }

    fn ensure_registered(&self, p: &Pipeline) -> Result<bool, ApiError> {
        let ev = self.ctx.prov.record_if(|state, _, _| {
            Ok::<_, ApiError>((state.pipeline(&p.id) != Some(p)).then(|| {
                NewEvent::global(EventBody::PipelineRegistered {
                    pipeline: p.clone(),
                })
            }))
        })?;
        Ok(ev.is_some())
    }

    pub fn pipeline(&self, id: &str) -> Result<Pipeline, ApiError> {
        self.ctx
            .prov
            .read(|s| s.pipeline(id).cloned())?
            .ok_or_else(|| ApiError::not_found(format!("unknown pipeline `{id}`")))
    }

    pub fn query_study(&self, req: &StudyQueryRequest) -> Result<StudySet, ApiError> {
        let snapshot = self.ctx.catalog.snapshot()?;
        let members = catalog::evaluate_query(&req.predicate, &snapshot)?;
        let ev = self.ctx.prov.record_with(|seq, at| {
            Ok::<_, ApiError>(NewEvent::global(EventBody::StudysetCreated {
                set: StudySet {
                    set_id: format!("ss-{seq:06}"),
                    owner: req.owner.clone(),
                    members,
                    created_at: at,
                    defining_query: Some(req.predicate.clone()),
                },
            }))
        })?;
        match ev.body {
            EventBody::StudysetCreated { set } => Ok(set),
            _ => unreachable!("recorded a STUDYSET_CREATED event"),
        }
    }

    pub fn study_set(&self, id: &str) -> Result<StudySet, ApiError> {
        self.ctx
            .prov
            .read(|s| s.study_set(id).cloned())?
            .ok_or_else(|| ApiError::not_found(format!("unknown study set `{id}`")))
    }

    pub fn homogeneity(
        &self,
        set_id: &str,
        req: &HomogeneityRequest,
    ) -> Result<HomogeneityReport, ApiError> {
        let set = self.study_set(set_id)?;
        Ok(catalog::check_homogeneity(
            &set,
            &req.fields,
            &self.ctx.catalog.snapshot()?,
        )?)
    }

    pub fn anonymize(
        &self,
        set_id: &str,
        req: &AnonymizeRequest,
    ) -> Result<AnonymizeResponse, ApiError> {
        let set = self.study_set(set_id)?;
        let (study_set, pseudonyms) =
            anonymize::anonymize_study(&set, &req.policy, &self.ctx.catalog, &self.ctx.prov)?;
        Ok(AnonymizeResponse {
            study_set,
            pseudonyms,
        })
    }

    /// Plans and records the plan (and its pipeline) so executions can refer
    /// to it by id. Repeating a request yields the same plan and no new events.
    pub fn plan(&self, req: &PlanRequest) -> Result<ExecutionPlan, ApiError> {
        let p = match (&req.pipeline, &req.pipeline_id) {
            (Some(doc), _) => {
                let doc = match doc {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                pipeline::parse_pipeline(&doc)?
            }
            (None, Some(id)) => self.pipeline(id)?,
            (None, None) => {
                return Err(ApiError::bad_request(
                    "plan request needs `pipeline` or `pipeline_id`",
                ))
            }
        };
        let grid = req
            .grid
            .clone()
            .or_else(|| self.grid.clone())
            .ok_or_else(|| ApiError::bad_request("no grid view given and none configured"))?;
        let study = req
            .studyset_id
            .as_deref()
            .map(|id| self.study_set(id))
            .transpose()?;
        let plan = planner::plan(&p, study.as_ref(), &grid)?;
        if req.pipeline.is_some() {
            self.ensure_registered(&p)?;
        }
        self.ctx.prov.record_if(|state, _, _| {
            Ok::<_, ApiError>(state.plan(&plan.plan_id).is_none().then(|| {
                NewEvent::global(EventBody::PlanCreated {
                    plan: plan.clone(),
                    pipeline: p,
                })
            }))
        })?;
        Ok(plan)
    }

    pub fn stored_plan(&self, plan_id: &str) -> Result<(ExecutionPlan, Pipeline), ApiError> {
        self.ctx
            .prov
            .read(|s| s.plan(plan_id).map(|(a, b)| (a.clone(), b.clone())))?
            .ok_or_else(|| ApiError::not_found(format!("unknown plan `{plan_id}`")))
    }

    fn options(&self, req: &ExecutionRequest) -> EnactOptions {
        EnactOptions {
            backend: req
                .backend
                .clone()
                .unwrap_or_else(|| self.default_backend.clone()),
            retry_limit: req
                .retry_limit
                .unwrap_or(crate::enactor::DEFAULT_RETRY_LIMIT),
        }
    }

    /// Records EXEC_STARTED and enacts on a background thread. Returns at once.
    pub fn start_execution(&self, req: &ExecutionRequest) -> Result<ExecutionStarted, ApiError> {
        let (plan, p) = self.stored_plan(&req.plan_id)?;
        let exec = self
            .enactor
            .begin(&self.ctx, &plan, &p, &self.options(req))?;
        let started = ExecutionStarted {
            execution_id: exec.id().to_string(),
            status: ExecutionState::Pending,
        };
        std::thread::Builder::new()
            .name(format!("enact-{}", exec.id()))
            .spawn(move || {
                // the outcome is in the log; nothing to hand back
                let _ = exec.run(&mut |_| {});
            })
            .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?;
        Ok(started)
    }

    /// Enacts in the calling thread, passing every recorded event to `observer`.
    pub fn run_execution(
        &self,
        req: &ExecutionRequest,
        observer: &mut dyn FnMut(&ProvenanceEvent),
    ) -> Result<ExecutionResult, ApiError> {
        let (plan, p) = self.stored_plan(&req.plan_id)?;
        Ok(self
            .enactor
            .enact(&self.ctx, &plan, &p, &self.options(req), observer)?)
    }

    pub fn execution(&self, id: &str) -> Result<ExecutionSummary, ApiError> {
        self.ctx
            .prov
            .read(|s| s.execution(id))?
            .ok_or_else(|| ApiError::not_found(format!("unknown execution `{id}`")))
    }

    /// Only the instance running an execution can cancel it.
    pub fn cancel_execution(&self, id: &str) -> Result<ExecutionSummary, ApiError> {
        self.enactor.cancel_execution(id)?;
        self.execution(id)
    }

    pub fn events(&self, filter: &EventFilter) -> Result<Vec<ProvenanceEvent>, ApiError> {
        Ok(self.ctx.prov.cached_query(filter)?)
    }

    pub fn lineage(&self, artifact_id: &str) -> Result<LineageGraph, ApiError> {
        let id: ArtifactId = artifact_id.parse()?;
        Ok(self.ctx.prov.lineage(&id)?)
    }

    pub fn artifact(&self, artifact_id: &str) -> Result<Vec<u8>, ApiError> {
        let id: ArtifactId = artifact_id.parse()?;
        Ok(self.ctx.store.read(&id)?)
    }

    pub fn ingest(&self, records: &[ImageRecord]) -> Result<IngestResponse, ApiError> {
        self.ctx.catalog.insert_all(records)?;
        Ok(IngestResponse {
            ingested: records.len(),
        })
    }
}

fn read_grid(path: &Path) -> Result<GridView, ApiError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ApiError::bad_request(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| ApiError::new(ErrorCode::InvalidGrid, format!("{}: {e}", path.display())))
}
