//! Per-layer execution profiles and the stage-level cost model.
//!
//! A profile records, for every model layer, the forward and backward time
//! per microbatch at each intra-node GPU count `d` in `1..=M`, plus the byte
//! sizes used for memory sizing and layer-copy costing. Stage costs are the
//! plain sums of the member layers' times at the stage's GPU count.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Finite and strictly positive; rejects NaN and infinities.
pub(crate) fn positive(value: f64) -> bool {
    value.is_finite() && value > 0.0
}

/// One model layer's measured costs.
///
/// `fwd_ms[d-1]` / `bwd_ms[d-1]` hold the per-microbatch time when the layer
/// runs tensor-parallel over `d` GPUs of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProfile {
    pub name: String,
    pub fwd_ms: Vec<f64>,
    pub bwd_ms: Vec<f64>,
    pub state_bytes: u64,
    pub activation_bytes_per_sample: u64,
}

impl LayerProfile {
    pub fn fwd_at(&self, d: u32) -> f64 {
        self.fwd_ms[(d - 1) as usize]
    }

    pub fn bwd_at(&self, d: u32) -> f64 {
        self.bwd_ms[(d - 1) as usize]
    }
}

/// An ordered set of layer profiles for one model, in execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProfileSet {
    pub layers: Vec<LayerProfile>,
    pub gpus_per_node: u32,
    pub microbatch_reference: u64,
}

impl LayerProfileSet {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn total_state_bytes(&self) -> u64 {
        self.layers.iter().map(|l| l.state_bytes).sum()
    }

    pub fn total_activation_bytes_per_sample(&self) -> u64 {
        self.layers.iter().map(|l| l.activation_bytes_per_sample).sum()
    }

    pub fn layer_state_bytes(&self) -> Vec<u64> {
        self.layers.iter().map(|l| l.state_bytes).collect()
    }

    /// Layers whose times increase when adding GPUs. More GPUs should never
    /// be slower; such entries are suspicious but not fatal.
    pub fn non_monotonic_warnings(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        for layer in &self.layers {
            for (which, times) in [("fwd", &layer.fwd_ms), ("bwd", &layer.bwd_ms)] {
                for d in 1..times.len() {
                    if times[d] > times[d - 1] {
                        warnings.push(format!(
                            "layer {}: {which}_ms[{}] = {} > {which}_ms[{}] = {}",
                            layer.name,
                            d + 1,
                            times[d],
                            d,
                            times[d - 1],
                        ));
                    }
                }
            }
        }
        warnings
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::EmptyModel);
        }
        if self.gpus_per_node == 0 {
            return Err(Error::InvalidProfile("gpus_per_node must be >= 1".into()));
        }
        if self.microbatch_reference == 0 {
            return Err(Error::InvalidProfile(
                "microbatch_reference must be >= 1".into(),
            ));
        }
        let m = self.gpus_per_node as usize;
        for layer in &self.layers {
            for (which, times) in [("fwd", &layer.fwd_ms), ("bwd", &layer.bwd_ms)] {
                if times.len() != m {
                    return Err(Error::MissingDeviceEntry {
                        layer: layer.name.clone(),
                        which,
                        d: times.len() as u32 + 1,
                    });
                }
                for (i, &t) in times.iter().enumerate() {
                    if !(t > 0.0) {
                        return Err(Error::NonPositiveTime {
                            layer: layer.name.clone(),
                            which,
                            d: i as u32 + 1,
                            value: t,
                        });
                    }
                }
            }
            if layer.state_bytes == 0 {
                return Err(Error::InvalidProfile(format!(
                    "layer {}: state_bytes must be > 0",
                    layer.name
                )));
            }
        }
        Ok(())
    }
}

/// Static description of the cluster the job runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub nodes: u32,
    pub gpus_per_node: u32,
    pub gpu_mem_bytes: u64,
    pub xfer_gbps: f64,
    pub coord_overhead_ms: f64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 || self.gpus_per_node == 0 {
            return Err(Error::InvalidCluster(
                "nodes and gpus_per_node must be >= 1".into(),
            ));
        }
        if !(self.xfer_gbps > 0.0) {
            return Err(Error::InvalidCluster("xfer_gbps must be > 0".into()));
        }
        if self.coord_overhead_ms < 0.0 {
            return Err(Error::InvalidCluster(
                "coord_overhead_ms must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ClusterSpec> {
        let raw = std::fs::read_to_string(path)?;
        let cluster: ClusterSpec = serde_json::from_str(&raw)?;
        cluster.validate()?;
        Ok(cluster)
    }
}

// Wire format for profile files: fwd/bwd maps are keyed by the GPU count as
// a decimal string, e.g. {"1": 2.0, "2": 1.1}.
#[derive(Serialize, Deserialize)]
struct LayerWire {
    name: String,
    state_bytes: u64,
    #[serde(default)]
    activation_bytes_per_sample: u64,
    fwd_ms: BTreeMap<String, f64>,
    bwd_ms: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct ProfileWire {
    gpus_per_node: u32,
    microbatch_reference: u64,
    layers: Vec<LayerWire>,
}

fn times_from_wire(layer: &str, which: &'static str, map: &BTreeMap<String, f64>, m: u32) -> Result<Vec<f64>> {
    let mut times = Vec::with_capacity(m as usize);
    for d in 1..=m {
        match map.get(&d.to_string()) {
            Some(&t) => times.push(t),
            None => {
                return Err(Error::MissingDeviceEntry {
                    layer: layer.to_string(),
                    which,
                    d,
                })
            }
        }
    }
    Ok(times)
}

/// Parses and validates a profile JSON file.
pub fn load_profile(path: impl AsRef<Path>) -> Result<LayerProfileSet> {
    let raw = std::fs::read_to_string(path)?;
    profile_from_json(&raw)
}

pub fn profile_from_json(raw: &str) -> Result<LayerProfileSet> {
    let wire: ProfileWire = serde_json::from_str(raw)?;
    let mut layers = Vec::with_capacity(wire.layers.len());
    for lw in &wire.layers {
        layers.push(LayerProfile {
            name: lw.name.clone(),
            fwd_ms: times_from_wire(&lw.name, "fwd", &lw.fwd_ms, wire.gpus_per_node)?,
            bwd_ms: times_from_wire(&lw.name, "bwd", &lw.bwd_ms, wire.gpus_per_node)?,
            state_bytes: lw.state_bytes,
            activation_bytes_per_sample: lw.activation_bytes_per_sample,
        });
    }
    let set = LayerProfileSet {
        layers,
        gpus_per_node: wire.gpus_per_node,
        microbatch_reference: wire.microbatch_reference,
    };
    set.validate()?;
    Ok(set)
}

pub fn profile_to_json(profile: &LayerProfileSet) -> String {
    let wire = ProfileWire {
        gpus_per_node: profile.gpus_per_node,
        microbatch_reference: profile.microbatch_reference,
        layers: profile
            .layers
            .iter()
            .map(|l| LayerWire {
                name: l.name.clone(),
                state_bytes: l.state_bytes,
                activation_bytes_per_sample: l.activation_bytes_per_sample,
                fwd_ms: l
                    .fwd_ms
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| ((i + 1).to_string(), t))
                    .collect(),
                bwd_ms: l
                    .bwd_ms
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| ((i + 1).to_string(), t))
                    .collect(),
            })
            .collect(),
    };
    let mut out = serde_json::to_string_pretty(&wire).expect("profile serializes");
    out.push('\n');
    out
}

pub fn save_profile(profile: &LayerProfileSet, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, profile_to_json(profile))?;
    Ok(())
}

/// Builds a synthetic profile of `layers` identical layers.
///
/// Tensor-parallel speedup follows `t / (1 + tp_eff * (d - 1))`, i.e. perfect
/// scaling at `tp_eff = 1` and no scaling at `tp_eff -> 0`.
pub fn synth_profile(
    layers: usize,
    gpus_per_node: u32,
    fwd_ms: f64,
    bwd_ms: f64,
    tp_eff: f64,
    state_bytes: u64,
) -> Result<LayerProfileSet> {
    if layers == 0 {
        return Err(Error::EmptyModel);
    }
    if gpus_per_node == 0 {
        return Err(Error::InvalidProfile("gpus_per_node must be >= 1".into()));
    }
    if !(fwd_ms > 0.0) || !(bwd_ms > 0.0) {
        return Err(Error::InvalidProfile("layer times must be > 0".into()));
    }
    if !(tp_eff > 0.0 && tp_eff <= 1.0) {
        return Err(Error::InvalidProfile("tp_eff must be in (0, 1]".into()));
    }
    if state_bytes == 0 {
        return Err(Error::InvalidProfile("state_bytes must be > 0".into()));
    }
    let scale = |t: f64| -> Vec<f64> {
        (1..=gpus_per_node)
            .map(|d| t / (1.0 + tp_eff * (d - 1) as f64))
            .collect()
    };
    let layer = |i: usize| LayerProfile {
        name: format!("layer{i}"),
        fwd_ms: scale(fwd_ms),
        bwd_ms: scale(bwd_ms),
        state_bytes,
        activation_bytes_per_sample: 0,
    };
    let set = LayerProfileSet {
        layers: (0..layers).map(layer).collect(),
        gpus_per_node,
        microbatch_reference: 1,
    };
    set.validate()?;
    Ok(set)
}

/// Sums forward and backward times of layers `[u, v)` at GPU count `d`.
pub fn stage_cost(profile: &LayerProfileSet, u: usize, v: usize, d: u32) -> Result<(f64, f64)> {
    if u >= v {
        return Err(Error::EmptyStage { u, v });
    }
    if v > profile.layer_count() {
        return Err(Error::LayerRangeOutOfBounds {
            u,
            v,
            layers: profile.layer_count(),
        });
    }
    if d == 0 || d > profile.gpus_per_node {
        return Err(Error::GpuCountOutOfRange {
            d,
            max: profile.gpus_per_node,
        });
    }
    let mut fwd = 0.0;
    let mut bwd = 0.0;
    for layer in &profile.layers[u..v] {
        fwd += layer.fwd_at(d);
        bwd += layer.bwd_at(d);
    }
    Ok((fwd, bwd))
}

/// Smallest pipeline node count that fits the model in memory.
///
/// `n0 = ceil(total_bytes / (M * gpu_mem_bytes * util))` with
/// `total_bytes = sum(state_bytes) + samples_per_gpu * sum(activation_bytes)`.
/// The utilization factor leaves headroom for activations and fragmentation.
pub fn min_nodes(
    profile: &LayerProfileSet,
    cluster: &ClusterSpec,
    util: f64,
    samples_per_gpu: u64,
) -> Result<u32> {
    if !(util > 0.0 && util <= 1.0) {
        return Err(Error::InvalidArgument("util must be in (0, 1]".into()));
    }
    if samples_per_gpu == 0 {
        return Err(Error::InvalidArgument("samples_per_gpu must be >= 1".into()));
    }
    cluster.validate()?;
    let total_bytes = profile.total_state_bytes()
        + samples_per_gpu * profile.total_activation_bytes_per_sample();
    let per_node = util * cluster.gpus_per_node as f64 * cluster.gpu_mem_bytes as f64;
    let usable = per_node * cluster.nodes as f64;
    if total_bytes as f64 > usable {
        return Err(Error::ModelDoesNotFit {
            needed_bytes: total_bytes,
            usable_bytes: usable as u64,
        });
    }
    let n0 = (total_bytes as f64 / per_node).ceil() as u32;
    Ok(n0.max(1))
}
