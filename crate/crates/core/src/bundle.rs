//! The serialized planning artifact: node spec, templates, per-layer state
//! sizes, and the cluster description, bundled so downstream commands
//! (plan, batch, simulate) run from one file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::plan::JobConfig;
use crate::profile::{ClusterSpec, LayerProfileSet};
use crate::reconfig::ReconfigEnv;
use crate::sim::SimConfig;
use crate::template::{CostTriple, NodeSpec, PipelineTemplate, StageSpec, TemplateSet};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PlanBundle {
    pub templates: TemplateSet,
    pub microbatch_reference: u64,
    pub layer_state_bytes: Vec<u64>,
    pub cluster: ClusterSpec,
}

#[derive(Serialize, Deserialize)]
struct TemplateWire {
    nodes: u32,
    stages: Vec<StageSpec>,
    t1_ms: f64,
    t2_ms: f64,
    t3_ms: f64,
    kstar: usize,
}

#[derive(Serialize, Deserialize)]
struct BundleWire {
    node_spec: NodeSpec,
    gpus_per_node: u32,
    microbatch_reference: u64,
    layer_state_bytes: Vec<u64>,
    cluster: ClusterSpec,
    templates: Vec<TemplateWire>,
}

impl PlanBundle {
    pub fn new(profile: &LayerProfileSet, cluster: &ClusterSpec, templates: TemplateSet) -> Self {
        PlanBundle {
            templates,
            microbatch_reference: profile.microbatch_reference,
            layer_state_bytes: profile.layer_state_bytes(),
            cluster: cluster.clone(),
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layer_state_bytes.len()
    }

    pub fn env(&self) -> ReconfigEnv<'_> {
        ReconfigEnv {
            templates: &self.templates,
            layer_state_bytes: &self.layer_state_bytes,
            cluster: &self.cluster,
        }
    }

    pub fn sim_config(&self, job: JobConfig, horizon_s: f64, seed: u64) -> Result<SimConfig> {
        if !(horizon_s > 0.0) {
            return Err(Error::InvalidArgument("horizon_s must be > 0".into()));
        }
        job.validate()?;
        Ok(SimConfig {
            templates: self.templates.clone(),
            layer_state_bytes: self.layer_state_bytes.clone(),
            cluster: self.cluster.clone(),
            job,
            horizon_s,
            seed,
        })
    }

    pub fn to_json(&self) -> String {
        let wire = BundleWire {
            node_spec: self.templates.spec.clone(),
            gpus_per_node: self.templates.gpus_per_node,
            microbatch_reference: self.microbatch_reference,
            layer_state_bytes: self.layer_state_bytes.clone(),
            cluster: self.cluster.clone(),
            templates: self
                .templates
                .templates
                .values()
                .map(|t| TemplateWire {
                    nodes: t.nodes,
                    stages: t.stages.clone(),
                    t1_ms: t.cost.t1_ms,
                    t2_ms: t.cost.t2_ms,
                    t3_ms: t.cost.t3_ms,
                    kstar: t.cost.kstar,
                })
                .collect(),
        };
        let mut out = serde_json::to_string_pretty(&wire).expect("bundle serializes");
        out.push('\n');
        out
    }

    pub fn from_json(raw: &str) -> Result<PlanBundle> {
        let wire: BundleWire = serde_json::from_str(raw)?;
        let layers = wire.layer_state_bytes.len();
        let mut templates = std::collections::BTreeMap::new();
        for tw in wire.templates {
            let template = PipelineTemplate {
                nodes: tw.nodes,
                gpus_per_node: wire.gpus_per_node,
                stages: tw.stages,
                cost: CostTriple {
                    t1_ms: tw.t1_ms,
                    t2_ms: tw.t2_ms,
                    t3_ms: tw.t3_ms,
                    kstar: tw.kstar,
                    infeasible: false,
                },
            };
            template.validate(layers)?;
            templates.insert(tw.nodes, template);
        }
        for &size in &wire.node_spec.sizes {
            if !templates.contains_key(&size) {
                return Err(Error::UnknownTemplate { nodes: size });
            }
        }
        Ok(PlanBundle {
            templates: TemplateSet {
                spec: wire.node_spec,
                gpus_per_node: wire.gpus_per_node,
                templates,
            },
            microbatch_reference: wire.microbatch_reference,
            layer_state_bytes: wire.layer_state_bytes,
            cluster: wire.cluster,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PlanBundle> {
        let raw = std::fs::read_to_string(path)?;
        PlanBundle::from_json(&raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::synth_profile;
    use crate::template::generate_template_set;

    #[test]
    fn bundle_round_trip_is_exact() {
        let profile = synth_profile(6, 2, 2.0, 4.0, 0.8, 1_000_000).unwrap();
        let cluster = ClusterSpec {
            nodes: 7,
            gpus_per_node: 2,
            gpu_mem_bytes: 1_000_000_000,
            xfer_gbps: 25.0,
            coord_overhead_ms: 250.0,
        };
        let ts = generate_template_set(&profile, 7, 1, 2).unwrap();
        let bundle = PlanBundle::new(&profile, &cluster, ts);
        let round = PlanBundle::from_json(&bundle.to_json()).unwrap();
        assert_eq!(round, bundle);
        // Re-serialization is byte-identical (deterministic output files).
        assert_eq!(round.to_json(), bundle.to_json());
    }
}
