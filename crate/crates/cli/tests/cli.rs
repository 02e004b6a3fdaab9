use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use medpipe_core::api::Service;
use medpipe_core::fixtures::{self, Workspace};
use medpipe_core::provenance::Clock;
use serde_json::{json, Value};

fn medpipe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medpipe"))
        .current_dir(dir)
        .arg("--data-dir")
        .arg(dir)
        .args(args)
        .env_remove("PIPELINE_DATA_DIR")
        .env_remove("PIPELINE_TOKEN")
        .env_remove("PIPELINE_GATEWAY_URL")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// A data directory with four catalogued images, a logical clock and a
/// simulated default backend with the given fault plan.
struct Setup {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

fn setup(faults: Value) -> Setup {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    let ws = Workspace::create(&dir, Clock::Logical, vec![]);
    ws.add_images(0, 4);
    drop(ws);
    let grid = serde_json::to_value(fixtures::diamond_grid()).unwrap();
    let config = json!({
        "data_dir": ".",
        "clock": "logical",
        "grid": grid,
        "backends": {
            "default_backend": "simgrid",
            "backends": {
                "local": {"work_dir": "work"},
                "simgrid": {"grid": grid, "fault_plan": faults}
            }
        }
    });
    std::fs::write(dir.join("config.json"), config.to_string()).unwrap();
    std::fs::write(dir.join("diamond.json"), fixtures::DIAMOND).unwrap();
    std::fs::write(dir.join("cycle.json"), fixtures::CYCLE).unwrap();
    Setup { _tmp: tmp, dir }
}

fn study(dir: &Path, predicate: &str) -> String {
    let o = medpipe(dir, &["--json", "study", "query", predicate]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    v["set_id"].as_str().unwrap().to_string()
}

#[test]
fn validate_reports_cycle() {
    let s = setup(json!([]));
    let o = medpipe(&s.dir, &["validate", "cycle.json"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).starts_with("CYCLE ["), "{}", stdout(&o));

    let o = medpipe(&s.dir, &["--json", "validate", "cycle.json"]);
    assert_eq!(code(&o), 1);
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["ok"], false);
    assert_eq!(report["issues"][0]["code"], "CYCLE");

    let o = medpipe(&s.dir, &["validate", "diamond.json"]);
    assert_eq!((code(&o), stdout(&o).as_str()), (0, "ok\n"));
}

#[test]
fn plan_output_is_deterministic() {
    let s = setup(json!([]));
    let set = study(&s.dir, "Modality = MR");
    let args = [
        "plan",
        "diamond.json",
        "--studyset",
        &set,
        "-o",
        "plan.json",
    ];
    let first = medpipe(&s.dir, &args);
    assert_eq!(
        code(&first),
        0,
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let second = medpipe(&s.dir, &args);
    assert_eq!(stdout(&first), stdout(&second));
    assert_eq!(
        std::fs::read_to_string(s.dir.join("plan.json")).unwrap(),
        stdout(&first)
    );
    let plan: Value = serde_json::from_str(&stdout(&first)).unwrap();
    assert!(plan["plan_id"].as_str().unwrap().starts_with("plan-"));
    assert_eq!(plan["assignments"].as_object().unwrap().len(), 4);
    assert_eq!(
        plan["study_fanout"]["a.src"],
        json!(["img-000", "img-001", "img-003"])
    );
}

#[test]
fn faulted_run_is_retried_and_logged() {
    let s = setup(json!([{"task": "b", "attempt": 1}]));
    let set = study(&s.dir, "PatientID = \"P0\"");
    let o = medpipe(
        &s.dir,
        &[
            "plan",
            "diamond.json",
            "--studyset",
            &set,
            "-o",
            "plan.json",
        ],
    );
    assert_eq!(code(&o), 0);

    let o = medpipe(&s.dir, &["run", "plan.json", "--retries", "1"]);
    let text = stdout(&o);
    assert_eq!(code(&o), 0, "{text}{}", String::from_utf8_lossy(&o.stderr));
    assert!(text.contains("b[0] attempt 1 RUNNING -> FAILED"), "{text}");
    assert!(text.contains("b[0] attempt 2 RUNNING -> DONE"), "{text}");
    assert!(text.contains("exec-"), "{text}");

    let o = medpipe(
        &s.dir,
        &[
            "--json",
            "prov",
            "events",
            "--filter",
            "task=b,kind=TASK_TRANSITION",
        ],
    );
    assert_eq!(code(&o), 0);
    let events: Vec<Value> = serde_json::from_str(&stdout(&o)).unwrap();
    let mut attempts: Vec<u64> = events
        .iter()
        .map(|e| e["payload"]["attempt"].as_u64().unwrap())
        .collect();
    attempts.dedup();
    assert_eq!(attempts, [1, 2]);

    // status agrees with the log
    let exec = events[0]["execution_id"].as_str().unwrap();
    let o = medpipe(&s.dir, &["status", exec]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with(&format!("{exec} SUCCEEDED")));
}

#[test]
fn permanent_failure_exits_nonzero() {
    let s = setup(json!([{"task": "b", "attempt": 1}, {"task": "b", "attempt": 2}]));
    let set = study(&s.dir, "PatientID = \"P0\"");
    medpipe(
        &s.dir,
        &[
            "plan",
            "diamond.json",
            "--studyset",
            &set,
            "-o",
            "plan.json",
        ],
    );
    let o = medpipe(&s.dir, &["--json", "run", "plan.json", "--retries", "1"]);
    assert_eq!(code(&o), 1);
    let err: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(err["code"], "ENACTMENT_FAILED");
    assert_eq!(err["detail"]["failure"]["task_id"], "b");
}

#[test]
fn exit_codes() {
    let s = setup(json!([]));
    let cases: &[(&[&str], i32)] = &[
        (&["validate", "diamond.json"], 0),
        (&["validate", "cycle.json"], 1),
        (&["validate", "missing.json"], 2),
        (&["frobnicate"], 2),
        (&["status"], 2),
        (&["status", "exec-999999"], 1),
        (&["prov", "events", "--filter", "colour=red"], 2),
        (&["prov", "events", "--filter", "kind=NOPE"], 2),
        (&["prov", "lineage", "nothex"], 2),
        (&["study", "query", "Colour = red"], 1),
        (&["study", "check", "ss-999999", "--fields", "Modality"], 1),
        (&["artifact", &"0".repeat(64)], 1),
        (&["run", "missing-plan.json"], 2),
    ];
    for (args, want) in cases {
        let o = medpipe(&s.dir, args);
        assert_eq!(
            code(&o),
            *want,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn study_commands() {
    let s = setup(json!([]));
    let set = study(&s.dir, "Age >= 60");
    let o = medpipe(&s.dir, &["study", "check", &set, "--fields", "Modality"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "not homogeneous\n  img-002 Modality=CT\n");

    std::fs::write(
        s.dir.join("policy.json"),
        r#"{"rules": [{"tag": "PatientName", "action": "REMOVE"},
                      {"tag": "PatientID", "action": "PSEUDONYMIZE"}],
            "salt": "s"}"#,
    )
    .unwrap();
    let o = medpipe(
        &s.dir,
        &["--json", "anonymize", &set, "--policy", "policy.json"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["study_set"]["members"].as_array().unwrap().len(), 4);
    assert!(stdout(&o).contains("47c12c7e754fe3b8"));
}

#[test]
fn remote_json_matches_gateway_and_local() {
    let s = setup(json!([]));
    let set = study(&s.dir, "Modality = MR");
    let plan_args = ["--json", "plan", "diamond.json", "--studyset", &set];
    let local_plan = stdout(&medpipe(&s.dir, &plan_args));

    let rt = tokio::runtime::Runtime::new().unwrap();
    let cfg: medpipe_core::api::ServiceConfig =
        serde_json::from_str(&std::fs::read_to_string(s.dir.join("config.json")).unwrap()).unwrap();
    let mut cfg = cfg;
    cfg.resolve_paths(&s.dir);
    let svc = Service::open(&cfg).unwrap();
    let gw = rt
        .block_on(medpipe_gateway::spawn(
            svc,
            Some("tok".into()),
            "127.0.0.1:0",
        ))
        .unwrap();
    let url = gw.url();

    let remote = |extra: &[&str]| {
        let mut args = vec!["--remote", &url, "--token", "tok"];
        args.extend_from_slice(extra);
        medpipe(&s.dir, &args)
    };
    let o = remote(&plan_args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), local_plan);

    std::fs::write(s.dir.join("plan.json"), &local_plan).unwrap();
    let o = remote(&["run", "plan.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("d[2] attempt 1 RUNNING -> DONE"));

    let events = ["--json", "prov", "events"];
    let (r, l) = (remote(&events), medpipe(&s.dir, &events));
    assert_eq!(code(&r), 0);
    assert_eq!(stdout(&r), stdout(&l));
    let body = rt.block_on(async {
        reqwest::Client::new()
            .get(format!("{url}/provenance/events"))
            .bearer_auth("tok")
            .send()
            .await
            .unwrap()
            .text()
            .await
            .unwrap()
    });
    assert_eq!(stdout(&r), body);

    let o = medpipe(&s.dir, &["--remote", &url, "--json", "prov", "events"]);
    assert_eq!(code(&o), 1);
    let err: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(err["code"], "UNAUTHORIZED");

    gw.kill();
}
