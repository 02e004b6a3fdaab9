//! One interface over the in-process service and a remote gateway.
//!
//! Every call returns the canonical body text alongside the decoded value, so
//! `--json` output is the same bytes whichever side answered.

use std::time::Duration;

use medpipe_core::api::{
    render, AnonymizeRequest, AnonymizeResponse, ApiError, ErrorCode, ExecutionRequest,
    ExecutionStarted, HomogeneityRequest, IngestResponse, PlanRequest, RegisterResponse, Service,
    StudyQueryRequest,
};
use medpipe_core::catalog::{HomogeneityReport, ImageRecord, StudySet};
use medpipe_core::enactor::ExecutionResult;
use medpipe_core::pipeline::ValidationReport;
use medpipe_core::planner::ExecutionPlan;
use medpipe_core::provenance::{
    EventFilter, ExecutionState, ExecutionSummary, LineageGraph, ProvenanceEvent,
};
use reqwest::blocking::{Client, RequestBuilder};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub struct Reply<T> {
    pub body: String,
    pub value: T,
}

fn local<T: Serialize>(r: Result<T, ApiError>) -> Result<Reply<T>, ApiError> {
    r.map(|value| Reply {
        body: render(&value),
        value,
    })
}

pub struct Remote {
    base: String,
    token: Option<String>,
    http: Client,
}

fn unreachable(e: reqwest::Error) -> ApiError {
    ApiError::new(ErrorCode::Internal, format!("gateway unreachable: {e}"))
}

impl Remote {
    pub fn new(base: &str, token: Option<String>) -> Self {
        Remote {
            base: base.trim_end_matches('/').to_string(),
            token,
            http: Client::new(),
        }
    }

    fn send(&self, req: RequestBuilder) -> Result<String, ApiError> {
        let req = match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        };
        let resp = req.send().map_err(unreachable)?;
        let status = resp.status();
        let text = resp.text().map_err(unreachable)?;
        if status.is_success() {
            Ok(text)
        } else {
            Err(serde_json::from_str(&text).unwrap_or_else(|_| {
                ApiError::new(
                    ErrorCode::Internal,
                    format!("gateway answered {status}: {text}"),
                )
            }))
        }
    }

    fn decode<T: DeserializeOwned>(body: String) -> Result<Reply<T>, ApiError> {
        let value = serde_json::from_str(&body).map_err(|e| {
            ApiError::new(
                ErrorCode::Internal,
                format!("unexpected gateway reply: {e}"),
            )
        })?;
        Ok(Reply { body, value })
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<Reply<T>, ApiError> {
        Self::decode(self.send(self.http.get(format!("{}{path}", self.base)))?)
    }

    fn post<T: DeserializeOwned>(&self, path: &str, body: String) -> Result<Reply<T>, ApiError> {
        let req = self
            .http
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body);
        Self::decode(self.send(req)?)
    }

    fn get_bytes(&self, path: &str) -> Result<Vec<u8>, ApiError> {
        let req = self.http.get(format!("{}{path}", self.base));
        let req = match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        };
        let resp = req.send().map_err(unreachable)?;
        if resp.status().is_success() {
            Ok(resp.bytes().map_err(unreachable)?.to_vec())
        } else {
            let text = resp.text().map_err(unreachable)?;
            Err(serde_json::from_str(&text)
                .unwrap_or_else(|_| ApiError::new(ErrorCode::Internal, text)))
        }
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("request serializes")
}

fn filter_query(f: &EventFilter) -> String {
    let mut terms = Vec::new();
    if let Some(e) = &f.execution_id {
        terms.push(format!("exec={e}"));
    }
    if let Some(t) = &f.task_id {
        terms.push(format!("task={t}"));
    }
    if let Some(k) = f.kind {
        terms.push(format!("kind={k}"));
    }
    if let Some(s) = f.seq_from {
        terms.push(format!("from={s}"));
    }
    if let Some(s) = f.seq_to {
        terms.push(format!("to={s}"));
    }
    terms.join("&")
}

pub enum Front {
    Local(Service),
    Remote(Remote),
}

impl Front {
    pub fn validate(&self, doc: &str) -> Result<Reply<ValidationReport>, ApiError> {
        match self {
            Front::Local(s) => local(s.validate(doc)),
            Front::Remote(r) => r.post("/pipelines/validate", doc.to_string()),
        }
    }

    pub fn register(&self, doc: &str) -> Result<Reply<RegisterResponse>, ApiError> {
        match self {
            Front::Local(s) => local(s.register_pipeline(doc)),
            Front::Remote(r) => r.post("/pipelines", doc.to_string()),
        }
    }

    pub fn plan(&self, req: &PlanRequest) -> Result<Reply<ExecutionPlan>, ApiError> {
        match self {
            Front::Local(s) => local(s.plan(req)),
            Front::Remote(r) => r.post("/plans", json(req)),
        }
    }

    pub fn status(&self, id: &str) -> Result<Reply<ExecutionSummary>, ApiError> {
        match self {
            Front::Local(s) => local(s.execution(id)),
            Front::Remote(r) => r.get(&format!("/executions/{id}")),
        }
    }

    pub fn events(&self, filter: &EventFilter) -> Result<Reply<Vec<ProvenanceEvent>>, ApiError> {
        match self {
            Front::Local(s) => local(s.events(filter)),
            Front::Remote(r) => r.get(&format!("/provenance/events?{}", filter_query(filter))),
        }
    }

    pub fn lineage(&self, id: &str) -> Result<Reply<LineageGraph>, ApiError> {
        match self {
            Front::Local(s) => local(s.lineage(id)),
            Front::Remote(r) => r.get(&format!("/provenance/lineage/{id}")),
        }
    }

    pub fn artifact(&self, id: &str) -> Result<Vec<u8>, ApiError> {
        match self {
            Front::Local(s) => s.artifact(id),
            Front::Remote(r) => r.get_bytes(&format!("/artifacts/{id}")),
        }
    }

    pub fn study_query(&self, req: &StudyQueryRequest) -> Result<Reply<StudySet>, ApiError> {
        match self {
            Front::Local(s) => local(s.query_study(req)),
            Front::Remote(r) => r.post("/studysets/query", json(req)),
        }
    }

    pub fn homogeneity(
        &self,
        id: &str,
        req: &HomogeneityRequest,
    ) -> Result<Reply<HomogeneityReport>, ApiError> {
        match self {
            Front::Local(s) => local(s.homogeneity(id, req)),
            Front::Remote(r) => r.post(&format!("/studysets/{id}/homogeneity"), json(req)),
        }
    }

    pub fn anonymize(
        &self,
        id: &str,
        req: &AnonymizeRequest,
    ) -> Result<Reply<AnonymizeResponse>, ApiError> {
        match self {
            Front::Local(s) => local(s.anonymize(id, req)),
            Front::Remote(r) => r.post(&format!("/studysets/{id}/anonymize"), json(req)),
        }
    }

    pub fn ingest(&self, records: &[ImageRecord]) -> Result<Reply<IngestResponse>, ApiError> {
        match self {
            Front::Local(s) => local(s.ingest(records)),
            Front::Remote(r) => r.post("/catalog/images", json(&records)),
        }
    }

    /// Runs to completion, handing each event to `observer` as it is recorded.
    /// Remotely this starts the execution and follows the log by polling.
    pub fn run(
        &self,
        req: &ExecutionRequest,
        observer: &mut dyn FnMut(&ProvenanceEvent),
    ) -> Result<Reply<ExecutionResult>, ApiError> {
        match self {
            Front::Local(s) => local(s.run_execution(req, observer)),
            Front::Remote(r) => {
                let started: Reply<ExecutionStarted> = r.post("/executions", json(req))?;
                let id = started.value.execution_id;
                let mut filter = EventFilter {
                    execution_id: Some(id.clone()),
                    ..Default::default()
                };
                loop {
                    let summary: Reply<ExecutionSummary> = r.get(&format!("/executions/{id}"))?;
                    let batch: Reply<Vec<ProvenanceEvent>> =
                        r.get(&format!("/provenance/events?{}", filter_query(&filter)))?;
                    for e in &batch.value {
                        observer(e);
                        filter.seq_from = Some(e.seq + 1);
                    }
                    if let Some(result) = summary.value.result {
                        let reply = local(Ok(result))?;
                        return match summary.value.status {
                            ExecutionState::Succeeded => Ok(reply),
                            ExecutionState::Canceled => Err(ApiError::new(
                                ErrorCode::Canceled,
                                format!("execution `{id}` was canceled"),
                            )
                            .with_detail(&reply.value)),
                            _ => Err(ApiError::new(
                                ErrorCode::EnactmentFailed,
                                failure_message(&reply.value),
                            )
                            .with_detail(&reply.value)),
                        };
                    }
                    std::thread::sleep(Duration::from_millis(50));
                }
            }
        }
    }
}

fn failure_message(r: &ExecutionResult) -> String {
    match &r.failure {
        Some(f) => format!(
            "task `{}` failed after exhausting retries: {}",
            f.task_id, f.diagnostics
        ),
        None => format!("execution `{}` failed", r.execution_id),
    }
}
