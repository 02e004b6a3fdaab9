//! Structural validation. Problems are collected as report entries; nothing
//! here fails.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::template::{self, Segment};
use super::{is_valid_name, Pipeline, PortRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IssueCode {
    /// Malformed document (only produced when a parse failure is folded into a report).
    Syntax,
    DupId,
    DupActor,
    BadName,
    DupPort,
    UnknownActor,
    UnknownTask,
    UnknownPort,
    PortDirection,
    MultiplyFed,
    Unfed,
    Cycle,
    TemplateRef,
    UnboundParam,
    UnknownParam,
    BadPersist,
    BadGather,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub code: IssueCode,
    /// Task ids, `task.port` endpoints or an edge rendered as `a.o->b.i`.
    pub locus: Vec<String>,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn from_issues(issues: Vec<Issue>) -> Self {
        ValidationReport {
            ok: issues.is_empty(),
            issues,
        }
    }

    pub fn has(&self, code: IssueCode) -> bool {
        self.issues.iter().any(|i| i.code == code)
    }
}

struct Collector(Vec<Issue>);

impl Collector {
    fn push(&mut self, code: IssueCode, locus: Vec<String>, message: impl Into<String>) {
        self.0.push(Issue {
            code,
            locus,
            message: message.into(),
        });
    }
}

pub fn validate(p: &Pipeline) -> ValidationReport {
    let mut c = Collector(Vec::new());
    check_actors(p, &mut c);
    check_tasks(p, &mut c);
    check_edges_and_feeding(p, &mut c);
    if let Some(cycle) = find_cycle(p) {
        let mut shown = cycle.clone();
        shown.push(cycle[0].clone());
        c.push(
            IssueCode::Cycle,
            cycle,
            format!("dependency cycle {}", shown.join(" -> ")),
        );
    }
    ValidationReport::from_issues(c.0)
}

fn check_actors(p: &Pipeline, c: &mut Collector) {
    let mut seen = BTreeSet::new();
    for a in &p.actors {
        let loc = vec![format!("{}@{}", a.name, a.version)];
        if !seen.insert(&a.name) {
            c.push(
                IssueCode::DupActor,
                loc.clone(),
                format!("actor `{}` declared twice", a.name),
            );
        }
        if !is_valid_name(&a.name) {
            c.push(
                IssueCode::BadName,
                loc.clone(),
                format!("invalid actor name `{}`", a.name),
            );
        }
        let mut ports = BTreeSet::new();
        for port in a.inputs.iter().chain(&a.outputs) {
            if !ports.insert(port) {
                c.push(
                    IssueCode::DupPort,
                    loc.clone(),
                    format!("port `{port}` declared twice on actor `{}`", a.name),
                );
            }
        }
        match template::parse(&a.command) {
            Err(e) => c.push(IssueCode::TemplateRef, loc.clone(), e.to_string()),
            Ok(words) => {
                for seg in words.iter().flatten() {
                    let bad = match seg {
                        Segment::Input(x) if !a.has_input(x) => Some(("input", x)),
                        Segment::Output(x) if !a.has_output(x) => Some(("output", x)),
                        Segment::Param(x) if !a.params.contains(x) => Some(("parameter", x)),
                        _ => None,
                    };
                    if let Some((kind, name)) = bad {
                        c.push(
                            IssueCode::TemplateRef,
                            loc.clone(),
                            format!("command references undeclared {kind} `{name}`"),
                        );
                    }
                }
            }
        }
    }
}

fn check_tasks(p: &Pipeline, c: &mut Collector) {
    let mut seen = BTreeSet::new();
    for t in &p.tasks {
        let loc = vec![t.id.clone()];
        if !seen.insert(&t.id) {
            c.push(
                IssueCode::DupId,
                loc.clone(),
                format!("task id `{}` is not unique", t.id),
            );
        }
        if t.id.is_empty() || t.id.contains('.') {
            c.push(
                IssueCode::BadName,
                loc.clone(),
                format!("invalid task id `{}`", t.id),
            );
        }
        let Some(actor) = p.actor(&t.actor) else {
            c.push(
                IssueCode::UnknownActor,
                loc.clone(),
                format!("task `{}` uses unknown actor `{}`", t.id, t.actor),
            );
            continue;
        };
        for param in &actor.params {
            if !t.params.contains_key(param) {
                c.push(
                    IssueCode::UnboundParam,
                    loc.clone(),
                    format!("parameter `{param}` of `{}` is not bound", t.actor),
                );
            }
        }
        for key in t.params.keys() {
            if !actor.params.contains(key) && !actor.has_input(key) {
                c.push(
                    IssueCode::UnknownParam,
                    loc.clone(),
                    format!(
                        "`{key}` is neither a parameter nor an input of `{}`",
                        t.actor
                    ),
                );
            }
        }
        for port in &t.persist {
            if !actor.has_output(port) {
                c.push(
                    IssueCode::BadPersist,
                    vec![format!("{}.{}", t.id, port)],
                    format!("persist names `{port}`, which is not an output port"),
                );
            }
        }
        for port in &t.gather {
            if !actor.has_input(port) {
                c.push(
                    IssueCode::BadGather,
                    vec![format!("{}.{}", t.id, port)],
                    format!("gather names `{port}`, which is not an input port"),
                );
            }
        }
    }
}

fn check_edges_and_feeding(p: &Pipeline, c: &mut Collector) {
    let mut feeds: BTreeMap<PortRef, Vec<String>> = BTreeMap::new();

    for e in &p.edges {
        let loc = vec![e.to_string()];
        let mut endpoints_ok = true;
        for (end, want_output) in [(&e.from, true), (&e.to, false)] {
            let Some(task) = p.task(&end.task) else {
                c.push(
                    IssueCode::UnknownTask,
                    loc.clone(),
                    format!("unknown task `{}`", end.task),
                );
                endpoints_ok = false;
                continue;
            };
            let Some(actor) = p.actor(&task.actor) else {
                endpoints_ok = false;
                continue;
            };
            let (right, wrong) = if want_output {
                (actor.has_output(&end.port), actor.has_input(&end.port))
            } else {
                (actor.has_input(&end.port), actor.has_output(&end.port))
            };
            if !right {
                endpoints_ok = false;
                let code = if wrong {
                    IssueCode::PortDirection
                } else {
                    IssueCode::UnknownPort
                };
                let dir = if want_output { "output" } else { "input" };
                c.push(code, loc.clone(), format!("`{end}` is not an {dir} port"));
            }
        }
        if endpoints_ok {
            feeds
                .entry(e.to.clone())
                .or_default()
                .push(format!("edge {e}"));
        }
    }

    for s in &p.study_inputs {
        match p.actor_of(&s.task) {
            None if p.task(&s.task).is_none() => c.push(
                IssueCode::UnknownTask,
                vec![s.to_string()],
                format!("study input names unknown task `{}`", s.task),
            ),
            Some(a) if !a.has_input(&s.port) => c.push(
                IssueCode::PortDirection,
                vec![s.to_string()],
                format!("study input `{s}` is not an input port"),
            ),
            Some(_) => feeds.entry(s.clone()).or_default().push("study set".into()),
            None => {}
        }
    }

    let mut seen = BTreeSet::new();
    for t in &p.tasks {
        if !seen.insert(&t.id) {
            continue;
        }
        let Some(actor) = p.actor(&t.actor) else {
            continue;
        };
        for port in &actor.inputs {
            let key = PortRef::new(&t.id, port);
            let mut sources = feeds.remove(&key).unwrap_or_default();
            if t.params.contains_key(port) {
                sources.push("literal".into());
            }
            match sources.len() {
                0 => c.push(
                    IssueCode::Unfed,
                    vec![key.to_string()],
                    format!("input `{key}` is not fed"),
                ),
                1 => {}
                _ => c.push(
                    IssueCode::MultiplyFed,
                    vec![key.to_string()],
                    format!("input `{key}` is fed by {}", sources.join(", ")),
                ),
            }
        }
    }
}

/// A witness cycle starting at the smallest task id that lies on any cycle;
/// the shortest such cycle, preferring lexicographically smaller successors.
pub(crate) fn find_cycle(p: &Pipeline) -> Option<Vec<String>> {
    let succ = p.successors();
    for &start in succ.keys() {
        // BFS from start's successors back to start.
        let mut parent: BTreeMap<&str, &str> = BTreeMap::new();
        let mut queue = VecDeque::new();
        for &n in &succ[start] {
            if n == start {
                return Some(vec![start.to_string()]);
            }
            if !parent.contains_key(n) {
                parent.insert(n, start);
                queue.push_back(n);
            }
        }
        while let Some(n) = queue.pop_front() {
            for &m in &succ[n] {
                if m == start {
                    let mut path = vec![n];
                    let mut cur = n;
                    while let Some(&prev) = parent.get(cur) {
                        if prev == start {
                            break;
                        }
                        path.push(prev);
                        cur = prev;
                    }
                    path.push(start);
                    path.reverse();
                    return Some(path.into_iter().map(String::from).collect());
                }
                if !parent.contains_key(m) {
                    parent.insert(m, n);
                    queue.push_back(m);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::parse_pipeline;

    fn doc(tasks: &[&str], edges: &[(&str, &str)], study: &[&str]) -> Pipeline {
        let tasks_json: Vec<String> = tasks
            .iter()
            .map(|t| format!(r#""{t}": {{"actor": "step", "version": "1"}}"#))
            .collect();
        let edges_json: Vec<String> = edges
            .iter()
            .map(|(f, t)| format!(r#"{{"from": "{f}.out", "to": "{t}.in"}}"#))
            .collect();
        let study_json: Vec<String> = study.iter().map(|s| format!(r#""{s}.in""#)).collect();
        let text = format!(
            r#"{{"id": "t",
                "actors": {{"step": {{"version": "1", "command": "cat {{in:in}} > {{out:out}}",
                                      "inputs": ["in"], "outputs": ["out"]}}}},
                "tasks": {{{}}}, "edges": [{}], "study_inputs": [{}]}}"#,
            tasks_json.join(","),
            edges_json.join(","),
            study_json.join(",")
        );
        parse_pipeline(&text).unwrap()
    }

    #[test]
    fn branching_dag_is_ok() {
        let p = doc(&["a", "b", "c"], &[("a", "b"), ("a", "c")], &["a"]);
        let r = validate(&p);
        assert!(r.ok, "{:?}", r.issues);
    }

    #[test]
    fn two_cycle_is_named() {
        let p = doc(&["a", "b"], &[("a", "b"), ("b", "a")], &[]);
        let r = validate(&p);
        let cyc = r
            .issues
            .iter()
            .find(|i| i.code == IssueCode::Cycle)
            .unwrap();
        assert_eq!(cyc.locus, vec!["a", "b"]);
        assert!(!r.ok);
    }

    #[test]
    fn witness_starts_at_smallest_id() {
        let p = doc(
            &["a", "x", "y", "z"],
            &[("a", "x"), ("z", "x"), ("x", "y"), ("y", "z")],
            &[],
        );
        let cyc = find_cycle(&p).unwrap();
        assert_eq!(cyc, vec!["x", "y", "z"]);
    }

    #[test]
    fn self_loop() {
        let p = doc(&["a"], &[("a", "a")], &[]);
        assert_eq!(find_cycle(&p).unwrap(), vec!["a"]);
    }

    #[test]
    fn duplicate_ids_reported() {
        let text = r#"{"id": "t",
            "actors": {"echo": {"version": "1", "command": "echo hi"}},
            "tasks": {"t1": {"actor": "echo"}, "t1": {"actor": "echo"}}}"#;
        let r = validate(&parse_pipeline(text).unwrap());
        assert!(r.has(IssueCode::DupId));
    }

    #[test]
    fn unfed_and_multiply_fed_ports() {
        let p = doc(&["a", "b"], &[], &[]);
        let r = validate(&p);
        assert_eq!(
            r.issues
                .iter()
                .filter(|i| i.code == IssueCode::Unfed)
                .count(),
            2
        );

        let p = doc(&["a", "b"], &[("a", "b")], &["a", "b"]);
        let r = validate(&p);
        assert!(r.has(IssueCode::MultiplyFed));
    }

    #[test]
    fn template_and_param_problems() {
        let text = r#"{"id": "t",
            "actors": {"bet": {"version": "1", "command": "bet {in:src} {out:o} -f {param:f} {param:g}",
                               "inputs": ["src"], "outputs": ["o"], "params": ["f"]}},
            "tasks": {"t1": {"actor": "bet", "params": {"src": "lit", "zzz": "1"}}}}"#;
        let r = validate(&parse_pipeline(text).unwrap());
        assert!(r.has(IssueCode::TemplateRef));
        assert!(r.has(IssueCode::UnboundParam));
        assert!(r.has(IssueCode::UnknownParam));
        assert!(
            !r.has(IssueCode::Unfed),
            "literal-bound input counts as fed"
        );
    }

    #[test]
    fn programmatic_unknown_refs_become_issues() {
        let mut p = doc(&["a", "b"], &[("a", "b")], &["a"]);
        p.edges.push(crate::pipeline::Edge::new(
            PortRef::new("ghost", "out"),
            PortRef::new("b", "out"),
        ));
        let r = validate(&p);
        assert!(r.has(IssueCode::UnknownTask));
        assert!(r.has(IssueCode::PortDirection));
    }
}
