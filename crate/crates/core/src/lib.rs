//! Planner and resilience simulator for hybrid-parallel (pipeline + tensor +
//! data parallel) training.
//!
//! The library is organized around a planning/execution split:
//!
//! * [`profile`] ingests or synthesizes per-layer execution profiles and
//!   exposes the stage-level cost model.
//! * [`template`] computes the node specification (how many pipeline
//!   templates, with how many nodes each) and builds each template's
//!   GPU-stage mapping with a memoized divide-and-conquer search.
//! * [`plan`] enumerates every feasible pipeline-set combination for a node
//!   count, distributes the global batch across heterogeneous pipelines, and
//!   selects the throughput-optimal instantiation plan.
//! * [`reconfig`] is the dynamic-reconfiguration state machine: it applies
//!   node failures and joins to a live [`reconfig::ExecutionState`] via
//!   reinstantiation, node borrowing, and pipeline merging, and produces
//!   layer-copy plans and per-layer synchronization groups.
//! * [`sim`] replays node-availability traces against the planner and the
//!   reconfiguration engine, reporting throughput over time and an
//!   effective-time breakdown.
//! * [`bundle`] is the serialized planning artifact consumed by the CLI.
//!
//! All planner types are immutable after construction and safe to share
//! across threads. Template generation itself is single-threaded; results
//! are deterministic functions of their inputs.

pub mod bundle;
pub mod error;
pub mod plan;
pub mod profile;
pub mod reconfig;
pub mod sim;
pub mod template;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
