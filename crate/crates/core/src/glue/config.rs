//! Backend selection file.
//!
//! ```json
//! {"default_backend": "local",
//!  "backends": {"local": {"max_concurrent": 4},
//!               "simgrid": {"grid_view_file": "grid.json",
//!                           "actor_runtimes": {"prep": 3},
//!                           "fault_plan": [{"task": "b", "attempt": 1}]}}}
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{FaultSpec, Glue, GlueError, LocalAdaptor, SimGridAdaptor, SimGridConfig};
use crate::artifact::ArtifactStore;
use crate::planner::GridView;

fn default_max_concurrent() -> usize {
    4
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent: usize,
    /// Parent of per-job working directories; defaults to the system temp dir.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub work_dir: Option<PathBuf>,
}

impl Default for LocalConfig {
    fn default() -> Self {
        LocalConfig {
            max_concurrent: default_max_concurrent(),
            work_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimGridFileConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_view_file: Option<PathBuf>,
    /// Inline alternative to `grid_view_file`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridView>,
    #[serde(default)]
    pub actor_runtimes: BTreeMap<String, u64>,
    #[serde(default)]
    pub fault_plan: Vec<FaultSpec>,
    #[serde(default = "default_true")]
    pub auto_advance: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Backends {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local: Option<LocalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simgrid: Option<SimGridFileConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub default_backend: String,
    #[serde(default)]
    pub backends: Backends,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            default_backend: "local".into(),
            backends: Backends {
                local: Some(LocalConfig::default()),
                simgrid: None,
            },
        }
    }
}

impl BackendConfig {
    pub fn load(path: &Path) -> Result<Self, GlueError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GlueError::Backend(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| GlueError::Backend(format!("{}: {e}", path.display())))
    }

    /// Resolves the simulated grid, reading `grid_view_file` relative to `base`.
    pub fn simgrid_view(&self, base: &Path) -> Result<Option<GridView>, GlueError> {
        let Some(sim) = &self.backends.simgrid else {
            return Ok(None);
        };
        if let Some(g) = &sim.grid {
            return Ok(Some(g.clone()));
        }
        let Some(file) = &sim.grid_view_file else {
            return Err(GlueError::Backend(
                "simgrid needs `grid_view_file` or `grid`".into(),
            ));
        };
        let path = base.join(file);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| GlueError::Backend(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| GlueError::Backend(format!("{}: {e}", path.display())))
    }

    /// Registers every configured backend on a fresh [`Glue`].
    pub fn build(&self, store: &ArtifactStore, base: &Path) -> Result<Glue, GlueError> {
        let glue = Glue::new();
        if let Some(local) = &self.backends.local {
            let work = local
                .work_dir
                .as_ref()
                .map(|w| base.join(w))
                .unwrap_or_else(|| {
                    std::env::temp_dir().join(format!("medpipe-local-{}", std::process::id()))
                });
            glue.register_adaptor(
                "local",
                Arc::new(LocalAdaptor::new(
                    store.clone(),
                    work,
                    local.max_concurrent,
                )?),
            )?;
        }
        if let Some(sim) = &self.backends.simgrid {
            let grid = self.simgrid_view(base)?.unwrap_or_default();
            let cfg = SimGridConfig {
                grid,
                actor_runtimes: sim.actor_runtimes.clone(),
                fault_plan: sim.fault_plan.clone(),
            };
            glue.register_adaptor(
                "simgrid",
                Arc::new(SimGridAdaptor::new(store.clone(), cfg, sim.auto_advance)),
            )?;
        }
        if !glue.has_backend(&self.default_backend) {
            return Err(GlueError::UnknownBackend(self.default_backend.clone()));
        }
        Ok(glue)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_shape() {
        let cfg: BackendConfig = serde_json::from_str(
            r#"{"default_backend": "simgrid",
                "backends": {"local": {"max_concurrent": 2},
                             "simgrid": {"grid": {"sites": [{"site_id": "S1", "installed_actors": ["a@1"], "slots": 1, "cost_hint": 0}]},
                                         "actor_runtimes": {"a": 5},
                                         "fault_plan": [{"task": "b", "attempt": 1}]}}}"#,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path().join("artifacts")).unwrap();
        let glue = cfg.build(&store, dir.path()).unwrap();
        assert_eq!(glue.backends(), vec!["local", "simgrid"]);
    }

    #[test]
    fn default_backend_must_exist() {
        let cfg = BackendConfig {
            default_backend: "glite".into(),
            ..BackendConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        assert!(matches!(
            cfg.build(&store, dir.path()),
            Err(GlueError::UnknownBackend(_))
        ));
    }
}
