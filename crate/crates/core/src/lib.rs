//! Core library for authoring, planning and enacting medical image analysis
//! pipelines over pluggable execution backends, with full provenance capture.
//!
//! The layers, bottom-up:
//!
//! - [`pipeline`]: the abstract pipeline language, its JSON document form and
//!   structural validation.
//! - [`catalog`]: the image metadata catalog, study-set predicates and
//!   homogeneity checks.
//! - [`anonymize`]: header anonymization policies.
//! - [`planner`]: level scheduling and site placement.
//! - [`glue`]: the middleware-neutral job and file API with its adaptors.
//! - [`enactor`]: drives a plan through the glue layer.
//! - [`provenance`]: the append-only event log, artifact index and lineage.
//! - [`api`]: the request/response surface shared by the CLI and gateway.

pub mod anonymize;
pub mod api;
pub mod artifact;
pub mod catalog;
pub mod enactor;
pub mod fixtures;
pub mod glue;
pub mod pipeline;
pub mod planner;
pub mod provenance;

pub use artifact::{ArtifactId, ArtifactLocator, ArtifactStore};
pub use catalog::{Catalog, ImageRecord, StudySet};
pub use enactor::{EnactContext, EnactOptions, Enactor, ExecutionResult};
pub use glue::{Adaptor, Glue, JobDescription, JobHandle, JobState, JobStatus};
pub use pipeline::{Pipeline, ValidationReport};
pub use planner::{ExecutionPlan, GridView, SiteDescriptor};
pub use provenance::{EventFilter, ProvenanceEvent, ProvenanceStore};
