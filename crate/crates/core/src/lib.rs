//! Planner and step-level simulator for hybrid data / tensor / pipeline
//! parallel training of Transformer models.
//!
//! The pipeline is: parse the cluster, model and job documents ([`spec`]),
//! derive profiles ([`profile`]), search for the cheapest configuration
//! under the analytic cost model ([`cost`], [`search`]), then simulate the
//! run step by step ([`sim`]) with an optional re-planning controller
//! ([`selector`]).

pub mod comm;
pub mod cost;
pub mod error;
pub mod layout;
pub mod oracle;
pub mod profile;
pub mod search;
pub mod selector;
pub mod sim;
pub mod spec;
pub mod trace;
pub mod validate;

pub use comm::{comm_optimize, CommFlags, CommPlan};
pub use cost::{
    estimate_iteration, estimate_with_slowdown, memory_footprint, CostBreakdown, LayerStrategy,
    MemoryFootprint, ParallelismConfig, Workload,
};
pub use error::{Error, Result};
pub use profile::{profile_dataset, profile_hardware, profile_model, DatasetProfile, HardwareProfile, ModelProfile};
pub use search::{discover, exhaustive_plan, Degrees, SearchOptions, SearchResult};
pub use spec::{ClusterSpec, JobSpec, ModelSpec};

/// Builds the cost-model inputs from parsed documents.
pub fn workload(cluster: &ClusterSpec, model: &ModelSpec, job: &JobSpec, comm: CommPlan) -> Result<Workload> {
    Ok(Workload {
        hw: profile_hardware(cluster),
        model: profile_model(model, job.precision_bytes)?,
        dataset: profile_dataset(job),
        precision_bytes: job.precision_bytes,
        zero_stage_allowed: job.zero_stage_allowed,
        comm,
    })
}
