//! Global pre-enactment planning: level scheduling plus greedy site placement.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::StudySet;
use crate::pipeline::{validate, ActorRef, Pipeline, Task, ValidationReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteDescriptor {
    pub site_id: String,
    pub installed_actors: BTreeSet<ActorRef>,
    pub slots: u32,
    #[serde(default)]
    pub cost_hint: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridView {
    pub sites: Vec<SiteDescriptor>,
}

impl GridView {
    pub fn check(&self) -> Result<(), PlanError> {
        let mut ids = BTreeSet::new();
        for s in &self.sites {
            if !ids.insert(&s.site_id) {
                return Err(PlanError::InvalidGrid(format!(
                    "duplicate site `{}`",
                    s.site_id
                )));
            }
            if s.slots == 0 {
                return Err(PlanError::InvalidGrid(format!(
                    "site `{}` has zero slots",
                    s.site_id
                )));
            }
            if s.cost_hint.is_nan() || s.cost_hint < 0.0 {
                return Err(PlanError::InvalidGrid(format!(
                    "site `{}` has a negative or NaN cost_hint",
                    s.site_id
                )));
            }
        }
        Ok(())
    }

    pub fn site(&self, id: &str) -> Option<&SiteDescriptor> {
        self.sites.iter().find(|s| s.site_id == id)
    }
}

/// A concrete, site-assigned form of a pipeline.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub plan_id: String,
    pub pipeline_id: String,
    pub stages: Vec<Vec<String>>,
    pub assignments: BTreeMap<String, String>,
    /// `task.port` of each study-fed input -> the study members, in order.
    pub study_fanout: BTreeMap<String, Vec<String>>,
}

impl ExecutionPlan {
    pub fn stage_of(&self, task: &str) -> Option<usize> {
        self.stages.iter().position(|s| s.iter().any(|t| t == task))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("pipeline is not valid")]
    InvalidPipeline(ValidationReport),
    #[error("no eligible site for task `{0}`")]
    NoEligibleSite(String),
    #[error("pipeline declares study inputs but the study set is empty")]
    EmptyStudySet,
    #[error("invalid grid view: {0}")]
    InvalidGrid(String),
}

/// Level scheduling: a task's stage is the length of the longest edge path
/// ending at it. Stage members are sorted.
///
/// The pipeline must be a DAG; tasks on a cycle are left out.
pub fn parallel_stages(p: &Pipeline) -> Vec<Vec<String>> {
    let succ = p.successors();
    let Some(order) = p.topological_order() else {
        return Vec::new();
    };
    let mut level: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &order {
        let l = *level.entry(t.as_str()).or_insert(0);
        for next in &succ[t.as_str()] {
            let e = level.entry(next).or_insert(0);
            *e = (*e).max(l + 1);
        }
    }
    let depth = level.values().copied().max().map_or(0, |d| d + 1);
    let mut stages = vec![Vec::new(); depth];
    for (t, l) in level {
        stages[l].push(t.to_string());
    }
    stages
}

/// Sites with the task's exact (actor, version) installed, by site id.
pub fn eligible_sites(task: &Task, grid: &GridView) -> Vec<String> {
    let mut out: Vec<String> = grid
        .sites
        .iter()
        .filter(|s| s.installed_actors.contains(&task.actor))
        .map(|s| s.site_id.clone())
        .collect();
    out.sort();
    out
}

/// Plans `p` against a static grid snapshot.
///
/// Each task goes to the eligible site with the smallest projected load per
/// slot, where projected load is one more than the number of tasks of the same
/// stage already placed there. Ties prefer lower `cost_hint`, then site id.
pub fn plan(
    p: &Pipeline,
    study: Option<&StudySet>,
    grid: &GridView,
) -> Result<ExecutionPlan, PlanError> {
    let report = validate(p);
    if !report.ok {
        return Err(PlanError::InvalidPipeline(report));
    }
    grid.check()?;

    let mut tasks: Vec<&Task> = p.tasks.iter().collect();
    tasks.sort_by(|a, b| a.id.cmp(&b.id));
    for t in &tasks {
        if eligible_sites(t, grid).is_empty() {
            return Err(PlanError::NoEligibleSite(t.id.clone()));
        }
    }

    let members: &[String] = study.map_or(&[], |s| s.members.as_slice());
    if !p.study_inputs.is_empty() && members.is_empty() {
        return Err(PlanError::EmptyStudySet);
    }

    let stages = parallel_stages(p);
    let mut assignments = BTreeMap::new();
    for stage in &stages {
        let mut load: BTreeMap<&str, u64> = BTreeMap::new();
        for task_id in stage {
            let task = p.task(task_id).expect("stage tasks exist");
            let best = grid
                .sites
                .iter()
                .filter(|s| s.installed_actors.contains(&task.actor))
                .min_by(|a, b| {
                    let la = load.get(a.site_id.as_str()).copied().unwrap_or(0) + 1;
                    let lb = load.get(b.site_id.as_str()).copied().unwrap_or(0) + 1;
                    // la/slots_a vs lb/slots_b without division
                    (la * u64::from(b.slots))
                        .cmp(&(lb * u64::from(a.slots)))
                        .then(a.cost_hint.total_cmp(&b.cost_hint))
                        .then_with(|| a.site_id.cmp(&b.site_id))
                })
                .expect("eligibility checked above");
            *load.entry(best.site_id.as_str()).or_insert(0) += 1;
            assignments.insert(task_id.clone(), best.site_id.clone());
        }
    }

    let study_fanout: BTreeMap<String, Vec<String>> = p
        .study_inputs
        .iter()
        .map(|port| (port.to_string(), members.to_vec()))
        .collect();

    let plan_id = plan_digest(p, study, grid);
    Ok(ExecutionPlan {
        plan_id,
        pipeline_id: p.id.clone(),
        stages,
        assignments,
        study_fanout,
    })
}

fn plan_digest(p: &Pipeline, study: Option<&StudySet>, grid: &GridView) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(p).expect("pipeline serializes"));
    h.update([0x1f]);
    if let Some(s) = study {
        h.update(s.set_id.as_bytes());
        for m in &s.members {
            h.update([0x1f]);
            h.update(m.as_bytes());
        }
    }
    h.update([0x1f]);
    h.update(serde_json::to_vec(grid).expect("grid serializes"));
    format!("plan-{}", &hex::encode(h.finalize())[..16])
}

/// Checks a plan against its pipeline: stages partition the tasks and every
/// edge moves strictly forward.
pub fn check_plan(plan: &ExecutionPlan, p: &Pipeline) -> Result<(), String> {
    if plan.pipeline_id != p.id {
        return Err(format!(
            "plan is for pipeline `{}`, not `{}`",
            plan.pipeline_id, p.id
        ));
    }
    let mut seen = BTreeSet::new();
    for stage in &plan.stages {
        for t in stage {
            if !seen.insert(t.as_str()) {
                return Err(format!("task `{t}` appears in two stages"));
            }
            if !plan.assignments.contains_key(t) {
                return Err(format!("task `{t}` has no site assignment"));
            }
        }
    }
    if seen != p.task_ids() {
        return Err("plan stages do not cover exactly the pipeline's tasks".into());
    }
    for e in &p.edges {
        let (a, b) = (plan.stage_of(&e.from.task), plan.stage_of(&e.to.task));
        if a.cmp(&b) != Ordering::Less {
            return Err(format!("edge {e} does not move to a later stage"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{dag_pipeline, diamond};
    use crate::pipeline::PortRef;

    fn site(id: &str, actors: &[&str], slots: u32, cost: f64) -> SiteDescriptor {
        SiteDescriptor {
            site_id: id.into(),
            installed_actors: actors.iter().map(|a| a.parse().unwrap()).collect(),
            slots,
            cost_hint: cost,
        }
    }

    #[test]
    fn diamond_stages() {
        assert_eq!(
            parallel_stages(&diamond()),
            vec![vec!["a"], vec!["b", "c"], vec!["d"]]
        );
    }

    #[test]
    fn single_and_independent() {
        assert_eq!(parallel_stages(&dag_pipeline(1, &[])), vec![vec!["t0"]]);
        assert_eq!(
            parallel_stages(&dag_pipeline(2, &[])),
            vec![vec!["t0", "t1"]]
        );
        assert_eq!(
            parallel_stages(&dag_pipeline(3, &[(2, 0), (0, 1)])),
            vec![vec!["t2"], vec!["t0"], vec!["t1"]]
        );
    }

    #[test]
    fn eligibility() {
        let t = Task::new("t", "seg@2".parse().unwrap());
        let grid = GridView {
            sites: vec![
                site("S1", &["fsl@1"], 1, 0.0),
                site("S2", &["fsl@1", "seg@2"], 1, 0.0),
            ],
        };
        assert_eq!(eligible_sites(&t, &grid), vec!["S2"]);
        let grid = GridView {
            sites: vec![site("S1", &["fsl@1"], 1, 0.0)],
        };
        assert!(eligible_sites(&t, &grid).is_empty());
        let grid = GridView {
            sites: vec![
                site("S2", &["seg@2"], 1, 0.0),
                site("S1", &["seg@2"], 1, 0.0),
            ],
        };
        assert_eq!(eligible_sites(&t, &grid), vec!["S1", "S2"]);
        // version must match exactly
        let grid = GridView {
            sites: vec![site("S1", &["seg@2.0"], 1, 0.0)],
        };
        assert!(eligible_sites(&t, &grid).is_empty());
    }

    #[test]
    fn single_eligible_site_takes_both() {
        let p = dag_pipeline(2, &[]);
        let grid = GridView {
            sites: vec![
                site("S1", &["a0@1", "a1@1"], 1, 0.0),
                site("S2", &["other@1"], 1, 0.0),
            ],
        };
        let plan = plan(&p, None, &grid).unwrap();
        assert_eq!(plan.assignments["t0"], "S1");
        assert_eq!(plan.assignments["t1"], "S1");
    }

    #[test]
    fn load_balances_in_id_order() {
        let p = dag_pipeline(2, &[]);
        let both = ["a0@1", "a1@1"];
        let grid = GridView {
            sites: vec![site("S2", &both, 2, 1.0), site("S1", &both, 2, 1.0)],
        };
        let plan = plan(&p, None, &grid).unwrap();
        assert_eq!(plan.assignments["t0"], "S1");
        assert_eq!(plan.assignments["t1"], "S2");
    }

    #[test]
    fn cost_hint_and_slots_break_ties() {
        let p = dag_pipeline(1, &[]);
        let grid = GridView {
            sites: vec![site("S1", &["a0@1"], 1, 5.0), site("S2", &["a0@1"], 1, 1.0)],
        };
        assert_eq!(plan(&p, None, &grid).unwrap().assignments["t0"], "S2");
        let grid = GridView {
            sites: vec![site("S1", &["a0@1"], 1, 0.0), site("S2", &["a0@1"], 4, 9.0)],
        };
        assert_eq!(plan(&p, None, &grid).unwrap().assignments["t0"], "S2");
    }

    #[test]
    fn uninstalled_actor() {
        let p = dag_pipeline(3, &[]);
        let grid = GridView {
            sites: vec![site("S1", &["a0@1", "a2@1"], 1, 0.0)],
        };
        assert_eq!(
            plan(&p, None, &grid),
            Err(PlanError::NoEligibleSite("t1".into()))
        );
    }

    #[test]
    fn study_inputs_need_members() {
        let mut p = dag_pipeline(1, &[]);
        p.tasks[0].params.clear();
        p.study_inputs.push(PortRef::new("t0", "in0"));
        let grid = GridView {
            sites: vec![site("S1", &["a0@1"], 1, 0.0)],
        };
        assert_eq!(plan(&p, None, &grid), Err(PlanError::EmptyStudySet));
        let s = StudySet {
            set_id: "ss".into(),
            owner: "o".into(),
            members: vec!["i1".into(), "i2".into()],
            created_at: chrono::DateTime::UNIX_EPOCH,
            defining_query: None,
        };
        let plan1 = plan(&p, Some(&s), &grid).unwrap();
        assert_eq!(plan1.study_fanout["t0.in0"], vec!["i1", "i2"]);
        assert_eq!(plan1, plan(&p, Some(&s), &grid).unwrap());
        check_plan(&plan1, &p).unwrap();
    }

    #[test]
    fn bad_grid() {
        let p = dag_pipeline(1, &[]);
        let grid = GridView {
            sites: vec![site("S1", &["a0@1"], 0, 0.0)],
        };
        assert!(matches!(
            plan(&p, None, &grid),
            Err(PlanError::InvalidGrid(_))
        ));
    }
}
