//! Error type shared by every planner module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse failure: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("empty model: profile contains no layers")]
    EmptyModel,

    #[error("missing device-count entry: layer {layer} has no {which}_ms for d={d}")]
    MissingDeviceEntry {
        layer: String,
        which: &'static str,
        d: u32,
    },

    #[error("non-positive time: layer {layer} {which}_ms[{d}] = {value}")]
    NonPositiveTime {
        layer: String,
        which: &'static str,
        d: u32,
        value: f64,
    },

    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("invalid cluster: {0}")]
    InvalidCluster(String),

    #[error("empty stage: layer range [{u}, {v}) is empty")]
    EmptyStage { u: usize, v: usize },

    #[error("gpu count {d} out of range 1..={max}")]
    GpuCountOutOfRange { d: u32, max: u32 },

    #[error("layer range [{u}, {v}) exceeds model with {layers} layers")]
    LayerRangeOutOfBounds { u: usize, v: usize, layers: usize },

    #[error("model does not fit: needs {needed_bytes} bytes, cluster holds {usable_bytes} usable")]
    ModelDoesNotFit { needed_bytes: u64, usable_bytes: u64 },

    #[error("cannot maintain f+1 replicas: N={n} < (f+1)*n0={floor}")]
    ReplicaFloor { n: u32, floor: u32 },

    #[error("insufficient nodes for f+1 replicas: N'={n} < (f+1)*n0={floor}")]
    InsufficientNodes { n: u32, floor: u32 },

    #[error("too few layers for node count: {layers} layers cannot fill {nodes} nodes")]
    TooFewLayers { layers: usize, nodes: u32 },

    #[error("no feasible stage mapping for {nodes} nodes")]
    NoFeasibleMapping { nodes: u32 },

    #[error("no template for {nodes} nodes in the template set")]
    UnknownTemplate { nodes: u32 },

    #[error("global batch {global_batch} is not divisible by microbatch {microbatch}")]
    IndivisibleBatch { global_batch: u64, microbatch: u64 },

    #[error(
        "infeasible distribution: {microbatches} microbatches over {pipelines} pipelines \
         (recommended global batch: {recommended_global_batch})"
    )]
    InfeasibleDistribution {
        microbatches: u64,
        pipelines: usize,
        recommended_global_batch: u64,
    },

    #[error("no feasible plan: every candidate failed batch distribution \
             (recommended global batch: {recommended_global_batch})")]
    NoFeasiblePlan { recommended_global_batch: u64 },

    #[error("unknown node id {0}")]
    UnknownNode(u32),

    #[error("node id {0} is already alive")]
    NodeAlreadyAlive(u32),

    #[error("unrecoverable: layer {layer} has no alive owner")]
    Unrecoverable { layer: usize },

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    /// Recommended global batch carried by batch-distribution failures, if any.
    pub fn recommended_global_batch(&self) -> Option<u64> {
        match self {
            Error::InfeasibleDistribution {
                recommended_global_batch,
                ..
            }
            | Error::NoFeasiblePlan {
                recommended_global_batch,
            } => Some(*recommended_global_batch),
            _ => None,
        }
    }
}
