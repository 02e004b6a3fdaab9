//! `medpipe`: validate and plan pipelines, run them, and inspect study sets
//! and provenance, either in-process against a data directory or through a
//! gateway (`--remote`).
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

mod front;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use medpipe_core::anonymize::Policy;
use medpipe_core::api::{
    describe_event, render, AnonymizeRequest, ApiError, ErrorCode, ExecutionRequest,
    HomogeneityRequest, PlanRequest, Service, ServiceConfig, StudyQueryRequest,
};
use medpipe_core::catalog::ImageRecord;
use medpipe_core::planner::{ExecutionPlan, GridView};
use medpipe_core::provenance::{EventBody, EventFilter, LineageNode, ProvenanceEvent};
use medpipe_gateway::GatewayConfig;
use serde::Serialize;

use front::{Front, Remote, Reply};

#[derive(Parser)]
#[command(
    name = "medpipe",
    version,
    about = "Medical image analysis pipelines over pluggable backends"
)]
struct Cli {
    /// Directory holding the catalog, provenance log and artifact store.
    #[arg(
        long,
        global = true,
        env = "PIPELINE_DATA_DIR",
        default_value = ".medpipe"
    )]
    data_dir: PathBuf,
    /// Service config (JSON); defaults to `<data-dir>/config.json` when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print response bodies as JSON.
    #[arg(long, global = true)]
    json: bool,
    /// Talk to a gateway instead of the local stores. The URL defaults to
    /// $PIPELINE_GATEWAY_URL.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "", value_name = "URL")]
    remote: Option<String>,
    /// Bearer token for --remote.
    #[arg(long, global = true, env = "PIPELINE_TOKEN", hide_env_values = true)]
    token: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a pipeline document; exits 1 when it has issues.
    Validate { pipeline: PathBuf },
    /// Register a pipeline document.
    Register { pipeline: PathBuf },
    /// Plan a pipeline over a study set and print the plan.
    Plan {
        pipeline: PathBuf,
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        studyset: Option<String>,
        /// Also write the plan to this file.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Enact a plan, streaming task transitions.
    Run {
        plan: PathBuf,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        retries: Option<u32>,
    },
    /// Show an execution's status.
    Status { execution_id: String },
    #[command(subcommand)]
    Prov(ProvCommand),
    #[command(subcommand)]
    Study(StudyCommand),
    /// Copy a study set with anonymized headers.
    Anonymize {
        studyset: String,
        #[arg(long)]
        policy: PathBuf,
    },
    #[command(subcommand)]
    Catalog(CatalogCommand),
    /// Write an artifact's bytes to stdout or a file.
    Artifact {
        artifact_id: String,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP gateway.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum ProvCommand {
    /// List events, e.g. `--filter task=b,kind=TASK_TRANSITION`.
    Events {
        #[arg(long, default_value = "")]
        filter: String,
    },
    /// Show the derivation graph of an artifact.
    Lineage { artifact_id: String },
}

#[derive(Subcommand)]
enum StudyCommand {
    /// Create a study set from a predicate, e.g. `Modality = MR AND Age >= 60`.
    Query {
        predicate: String,
        #[arg(long, default_value = "default")]
        owner: String,
    },
    /// Report members deviating from the majority value of each field.
    Check {
        studyset: String,
        #[arg(long, value_delimiter = ',', required = true)]
        fields: Vec<String>,
    },
}

#[derive(Subcommand)]
enum CatalogCommand {
    /// Add image records from a JSON array or JSON-lines file.
    Ingest { records: PathBuf },
}

#[derive(Args)]
struct ServeArgs {
    /// Overrides the config and $PIPELINE_BIND_ADDRESS.
    #[arg(long)]
    bind: Option<String>,
}

fn usage(msg: impl Into<String>) -> ApiError {
    ApiError::bad_request(msg)
}

fn read(path: &Path) -> Result<String, ApiError> {
    std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ApiError> {
    serde_json::from_str(&read(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn service_config(cli: &Cli) -> Result<ServiceConfig, ApiError> {
    let path = cli
        .config
        .clone()
        .or_else(|| Some(cli.data_dir.join("config.json")).filter(|p| p.exists()));
    match path {
        Some(p) => {
            let mut cfg: ServiceConfig = read_json(&p)?;
            cfg.resolve_paths(p.parent().unwrap_or_else(|| Path::new(".")));
            Ok(cfg)
        }
        None => Ok(ServiceConfig::new(&cli.data_dir)),
    }
}

fn open_front(cli: &Cli) -> Result<Front, ApiError> {
    match &cli.remote {
        Some(url) => {
            let url = if url.is_empty() {
                std::env::var("PIPELINE_GATEWAY_URL")
                    .map_err(|_| usage("--remote needs a URL or $PIPELINE_GATEWAY_URL"))?
            } else {
                url.clone()
            };
            Ok(Front::Remote(Remote::new(&url, cli.token.clone())))
        }
        None => Ok(Front::Local(Service::open(&service_config(cli)?)?)),
    }
}

struct Out {
    json: bool,
}

impl Out {
    /// Prints the body under `--json`, otherwise the human rendering.
    fn emit<T>(&self, reply: &Reply<T>, human: impl FnOnce(&T) -> String) {
        let text = if self.json {
            reply.body.clone()
        } else {
            human(&reply.value)
        };
        let mut stdout = std::io::stdout().lock();
        let _ = stdout.write_all(text.as_bytes());
        if !text.ends_with('\n') && !text.is_empty() {
            let _ = stdout.write_all(b"\n");
        }
    }

    fn error(&self, e: &ApiError) {
        if self.json {
            print!("{}", render(e));
        } else {
            eprintln!("error: {}", e.message);
            if let Some(issues) = e.detail.get("issues").and_then(|i| i.as_array()) {
                for i in issues {
                    eprintln!(
                        "  {} {}",
                        i["code"].as_str().unwrap_or("?"),
                        i["message"].as_str().unwrap_or("")
                    );
                }
            }
        }
    }
}

fn event_line(e: &ProvenanceEvent) -> String {
    if let Some(line) = describe_event(e) {
        return line;
    }
    let exec = e.execution_id.as_deref().unwrap_or("-");
    let what = match &e.body {
        EventBody::PipelineRegistered { pipeline } => pipeline.id.clone(),
        EventBody::StudysetCreated { set } => {
            format!("{} ({} members)", set.set_id, set.members.len())
        }
        EventBody::Anonymized {
            source_set_id,
            target_set_id,
            ..
        } => format!("{source_set_id} -> {target_set_id}"),
        EventBody::PlanCreated { plan, .. } => plan.plan_id.clone(),
        EventBody::ExecStarted {
            plan_id, backend, ..
        } => format!("{plan_id} on {backend}"),
        EventBody::ArtifactCreated { artifact, .. } => {
            format!(
                "{} {}",
                artifact.artifact_id,
                wire_name(&artifact.classification)
            )
        }
        EventBody::ExecEnded { result } => wire_name(&result.status),
        EventBody::TaskTransition(_) => unreachable!("described above"),
    };
    format!("#{:<5} {} {exec} {what}", e.seq, e.kind())
}

/// The serialized name of a unit enum value, e.g. `CYCLE`.
fn wire_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => "?".into(),
    }
}

fn lines<I: IntoIterator<Item = String>>(it: I) -> String {
    it.into_iter().map(|l| l + "\n").collect()
}

fn run(cli: &Cli, out: &Out) -> Result<i32, ApiError> {
    if let Command::Serve(args) = &cli.command {
        return serve(cli, args);
    }
    let front = open_front(cli)?;
    match &cli.command {
        Command::Validate { pipeline } => {
            let r = front.validate(&read(pipeline)?)?;
            out.emit(&r, |rep| {
                if rep.ok {
                    "ok\n".into()
                } else {
                    lines(rep.issues.iter().map(|i| {
                        format!(
                            "{} [{}] {}",
                            wire_name(&i.code),
                            i.locus.join(", "),
                            i.message
                        )
                    }))
                }
            });
            return Ok(if r.value.ok { 0 } else { 1 });
        }
        Command::Register { pipeline } => {
            let r = front.register(&read(pipeline)?)?;
            out.emit(&r, |v| {
                format!(
                    "{} {}",
                    v.pipeline_id,
                    if v.registered {
                        "registered"
                    } else {
                        "unchanged"
                    }
                )
            });
        }
        Command::Plan {
            pipeline,
            grid,
            studyset,
            out: file,
        } => {
            let doc: serde_json::Value = read_json(pipeline)?;
            let grid: Option<GridView> = grid.as_deref().map(read_json).transpose()?;
            let r = front.plan(&PlanRequest {
                pipeline: Some(doc),
                pipeline_id: None,
                grid,
                studyset_id: studyset.clone(),
            })?;
            if let Some(f) = file {
                std::fs::write(f, &r.body)
                    .map_err(|e| usage(format!("cannot write {}: {e}", f.display())))?;
            }
            // the plan document is the human output too
            out.emit(&r, |_| r.body.clone());
        }
        Command::Run {
            plan,
            backend,
            retries,
        } => {
            let plan: ExecutionPlan = read_json(plan)?;
            let req = ExecutionRequest {
                plan_id: plan.plan_id,
                backend: backend.clone(),
                retry_limit: *retries,
            };
            let json = out.json;
            let r = front.run(&req, &mut |e| {
                if !json {
                    if let Some(line) = describe_event(e) {
                        println!("{line}");
                    }
                }
            })?;
            out.emit(&r, |res| {
                let mut s = format!("{} {}\n", res.execution_id, wire_name(&res.status));
                for o in &res.outputs {
                    let idx = o.study_index.map(|i| format!("[{i}]")).unwrap_or_default();
                    s += &format!("  {}.{}{idx} {}\n", o.task_id, o.port, o.artifact_id);
                }
                s
            });
        }
        Command::Status { execution_id } => {
            let r = front.status(execution_id)?;
            out.emit(&r, |s| {
                let mut text = format!(
                    "{} {} plan={} backend={}\n",
                    s.execution_id,
                    wire_name(&s.status),
                    s.plan_id,
                    s.backend
                );
                for a in &s.attempts {
                    let idx = a.study_index.map(|i| format!("[{i}]")).unwrap_or_default();
                    text += &format!("  {}{idx} attempt {} {}\n", a.task_id, a.attempt, a.state);
                }
                text
            });
        }
        Command::Prov(ProvCommand::Events { filter }) => {
            let f = EventFilter::parse_spec(filter).map_err(usage)?;
            let r = front.events(&f)?;
            out.emit(&r, |evs| lines(evs.iter().map(event_line)));
        }
        Command::Prov(ProvCommand::Lineage { artifact_id }) => {
            let r = front.lineage(artifact_id)?;
            out.emit(&r, |g| {
                let mut text = String::new();
                for n in &g.nodes {
                    text += &match n {
                        LineageNode::Artifact { id, record, .. } => {
                            format!("artifact {id} {}\n", wire_name(&record.classification))
                        }
                        LineageNode::Task { id, .. } => format!("task     {id}\n"),
                    };
                }
                for e in &g.edges {
                    text += &format!("  {} -{}-> {}\n", e.from, wire_name(&e.relation), e.to);
                }
                text
            });
        }
        Command::Study(StudyCommand::Query { predicate, owner }) => {
            let r = front.study_query(&StudyQueryRequest {
                predicate: predicate.clone(),
                owner: owner.clone(),
            })?;
            out.emit(&r, |s| {
                format!(
                    "{} {} members\n{}",
                    s.set_id,
                    s.members.len(),
                    lines(s.members.clone())
                )
            });
        }
        Command::Study(StudyCommand::Check { studyset, fields }) => {
            let r = front.homogeneity(
                studyset,
                &HomogeneityRequest {
                    fields: fields.clone(),
                },
            )?;
            out.emit(&r, |h| {
                let head = if h.homogeneous {
                    "homogeneous"
                } else {
                    "not homogeneous"
                };
                let rest = h.offenders.iter().map(|o| {
                    format!(
                        "  {} {}={}",
                        o.image_id,
                        o.tag,
                        o.value.as_deref().unwrap_or("<missing>")
                    )
                });
                format!("{head}\n{}", lines(rest))
            });
        }
        Command::Anonymize { studyset, policy } => {
            let policy = Policy::parse(&read(policy)?)?;
            let r = front.anonymize(studyset, &AnonymizeRequest { policy })?;
            out.emit(&r, |a| {
                format!(
                    "{} {} members, {} pseudonyms issued\n",
                    a.study_set.set_id,
                    a.study_set.members.len(),
                    a.pseudonyms.len()
                )
            });
        }
        Command::Catalog(CatalogCommand::Ingest { records }) => {
            let text = read(records)?;
            let parsed: Vec<ImageRecord> = if text.trim_start().starts_with('[') {
                serde_json::from_str(&text)
                    .map_err(|e| usage(format!("{}: {e}", records.display())))?
            } else {
                text.lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(serde_json::from_str)
                    .collect::<Result<_, _>>()
                    .map_err(|e| usage(format!("{}: {e}", records.display())))?
            };
            let r = front.ingest(&parsed)?;
            out.emit(&r, |i| format!("{} records ingested\n", i.ingested));
        }
        Command::Artifact {
            artifact_id,
            out: file,
        } => {
            let bytes = front.artifact(artifact_id)?;
            match file {
                Some(f) => std::fs::write(f, bytes)
                    .map_err(|e| usage(format!("cannot write {}: {e}", f.display())))?,
                None => {
                    let _ = std::io::stdout().write_all(&bytes);
                }
            }
        }
        Command::Serve(_) => unreachable!("handled above"),
    }
    Ok(0)
}

fn serve(cli: &Cli, args: &ServeArgs) -> Result<i32, ApiError> {
    let mut cfg = match &cli.config {
        Some(p) => GatewayConfig::load(p).map_err(|e| usage(e.to_string()))?,
        None => GatewayConfig::new(service_config(cli)?),
    }
    .with_env_overrides();
    if cli.token.is_some() {
        cfg.token = cli.token.clone();
    }
    if let Some(b) = &args.bind {
        cfg.bind_address = b.clone();
    }
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .try_init();
    let rt = tokio::runtime::Runtime::new()
        .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?;
    rt.block_on(medpipe_gateway::serve(cfg))
        .map_err(|e| ApiError::new(ErrorCode::Storage, e.to_string()))?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = Out { json: cli.json };
    let code = match run(&cli, &out) {
        Ok(code) => code,
        Err(e) => {
            out.error(&e);
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
