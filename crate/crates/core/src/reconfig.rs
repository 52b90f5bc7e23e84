//! Dynamic reconfiguration: failures and joins applied to a live execution
//! state.
//!
//! A failure repair runs in three escalating steps per affected pipeline:
//! reinstantiate from the template matching its surviving node count; if no
//! template fits, borrow nodes from pipelines that can spare them; and as a
//! last resort merge with another pipeline (a template for the merged size
//! exists whenever it reaches `n0` nodes and stays within the size range).
//! After the structural repair, missing layers are sourced from surviving
//! owners and the global batch is redistributed; the batch size itself
//! never changes.
//!
//! Every outcome carries the action list that produced it; replaying the
//! actions on the old state reproduces the new state exactly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::plan::{distribute_batch, select_plan, BatchAssignment, InstantiationPlan, JobConfig};
use crate::profile::ClusterSpec;
use crate::template::{NodeSpec, PipelineTemplate, TemplateSet};
use crate::{Error, Result};

/// Cluster-wide node identity. Joins mint fresh ids; ids are never reused.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Everything a reconfiguration needs besides the state itself.
#[derive(Clone, Copy)]
pub struct ReconfigEnv<'a> {
    pub templates: &'a TemplateSet,
    pub layer_state_bytes: &'a [u64],
    pub cluster: &'a ClusterSpec,
}

impl<'a> ReconfigEnv<'a> {
    fn spec(&self) -> &NodeSpec {
        &self.templates.spec
    }

    fn layer_count(&self) -> usize {
        self.layer_state_bytes.len()
    }
}

/// One live pipeline: a template reference plus the concrete nodes filling
/// its slots, in stage-packing order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineInstance {
    pub template_nodes: u32,
    pub nodes: Vec<NodeId>,
    /// Node slot (index into `nodes`) hosting each stage.
    pub stage_node: Vec<usize>,
}

impl PipelineInstance {
    pub fn from_template(template: &PipelineTemplate, nodes: Vec<NodeId>) -> Result<Self> {
        if nodes.len() != template.nodes as usize {
            return Err(Error::InvalidArgument(format!(
                "template for {} nodes given {} nodes",
                template.nodes,
                nodes.len()
            )));
        }
        Ok(PipelineInstance {
            template_nodes: template.nodes,
            nodes,
            stage_node: template.stage_node_index(),
        })
    }

    pub fn stage_node_id(&self, stage: usize) -> NodeId {
        self.nodes[self.stage_node[stage]]
    }

    /// Layers owned by each node slot of this pipeline.
    pub fn slot_layers(&self, template: &PipelineTemplate) -> Vec<BTreeSet<usize>> {
        let mut out = vec![BTreeSet::new(); self.nodes.len()];
        for (stage_idx, stage) in template.stages.iter().enumerate() {
            out[self.stage_node[stage_idx]].extend(stage.start..stage.end);
        }
        out
    }
}

/// The reconfiguration state machine's subject: live pipelines over the
/// alive node set.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionState {
    pub pipelines: Vec<PipelineInstance>,
    pub spec: NodeSpec,
    pub job: JobConfig,
    pub batch: BatchAssignment,
    pub alive: BTreeSet<NodeId>,
}

impl ExecutionState {
    /// Deploys a plan onto concrete node ids (consumed in sorted order,
    /// smallest templates first, matching the plan's pipeline order).
    pub fn instantiate(
        ts: &TemplateSet,
        plan: &InstantiationPlan,
        node_ids: &[NodeId],
        job: &JobConfig,
    ) -> Result<ExecutionState> {
        let mut ids: Vec<NodeId> = node_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != node_ids.len() {
            return Err(Error::InvalidArgument("duplicate node ids".into()));
        }
        let total: usize = plan
            .pipelines
            .iter()
            .map(|p| p.template_nodes as usize)
            .sum();
        if total != ids.len() {
            return Err(Error::InvalidArgument(format!(
                "plan needs {total} nodes, given {}",
                ids.len()
            )));
        }
        let mut pipelines = Vec::with_capacity(plan.pipelines.len());
        let mut cursor = 0usize;
        for planned in &plan.pipelines {
            let template = ts.template(planned.template_nodes)?;
            let slots = planned.template_nodes as usize;
            let nodes = ids[cursor..cursor + slots].to_vec();
            cursor += slots;
            pipelines.push(PipelineInstance::from_template(template, nodes)?);
        }
        let batch = match &plan.batch {
            Some(batch) => batch.clone(),
            None => {
                let times: Vec<f64> = pipelines
                    .iter()
                    .map(|p| Ok(ts.template(p.template_nodes)?.slowest_stage_ms()))
                    .collect::<Result<_>>()?;
                distribute_batch(&times, job.global_batch, job.microbatch)?
            }
        };
        Ok(ExecutionState {
            pipelines,
            spec: ts.spec.clone(),
            job: *job,
            batch,
            alive: ids.into_iter().collect(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.alive.len()
    }

    pub fn pipeline_sizes(&self) -> Vec<u32> {
        self.pipelines.iter().map(|p| p.nodes.len() as u32).collect()
    }

    /// Layers owned by every alive node.
    pub fn node_owned_layers(&self, ts: &TemplateSet) -> Result<BTreeMap<NodeId, BTreeSet<usize>>> {
        let mut owned: BTreeMap<NodeId, BTreeSet<usize>> = BTreeMap::new();
        for pipeline in &self.pipelines {
            let template = ts.template(pipeline.template_nodes)?;
            for (slot, layers) in pipeline.slot_layers(template).into_iter().enumerate() {
                owned.entry(pipeline.nodes[slot]).or_default().extend(layers);
            }
        }
        Ok(owned)
    }

    /// Checks every structural invariant against the template set.
    pub fn validate(&self, ts: &TemplateSet, layers: usize) -> Result<()> {
        if self.pipelines.len() < (self.job.f + 1) as usize {
            return Err(Error::InvalidArgument(format!(
                "{} pipelines < f+1 = {}",
                self.pipelines.len(),
                self.job.f + 1
            )));
        }
        let mut seen = BTreeSet::new();
        for pipeline in &self.pipelines {
            let template = ts.template(pipeline.template_nodes)?;
            if pipeline.nodes.len() != template.nodes as usize
                || pipeline.stage_node != template.stage_node_index()
            {
                return Err(Error::InvalidArgument(
                    "pipeline does not match its template".into(),
                ));
            }
            let covered: usize = template.stages.iter().map(|s| s.end - s.start).sum();
            if covered != layers {
                return Err(Error::InvalidArgument(
                    "pipeline does not cover every layer".into(),
                ));
            }
            for &node in &pipeline.nodes {
                if !self.alive.contains(&node) || !seen.insert(node) {
                    return Err(Error::InvalidArgument(format!(
                        "node {node} dead or assigned twice"
                    )));
                }
            }
        }
        if seen.len() != self.alive.len() {
            return Err(Error::InvalidArgument("idle alive nodes".into()));
        }
        if self.batch.total_microbatches() * self.job.microbatch != self.job.global_batch {
            return Err(Error::InvalidArgument(
                "batch assignment does not conserve the global batch".into(),
            ));
        }
        Ok(())
    }
}

/// One layer's worth of model state moving between nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTransfer {
    pub layer: usize,
    pub donor: NodeId,
    pub receiver: NodeId,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CopyPlan {
    pub transfers: Vec<LayerTransfer>,
}

impl CopyPlan {
    pub fn total_bytes(&self) -> u64 {
        self.transfers.iter().map(|t| t.bytes).sum()
    }
}

/// Audit-log entry; the sequence replays deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ReconfigAction {
    /// Remove failed nodes from the alive set and from their pipelines.
    DropNodes { failed: Vec<NodeId> },
    /// Re-template a pipeline onto the template matching its node count.
    Reinstantiate { pipeline: usize, template_nodes: u32 },
    /// Move `count` tail nodes of `from` to the end of `to`.
    Borrow { from: usize, to: usize, count: u32 },
    /// Append `from`'s nodes to `into` and delete `from`.
    Merge { into: usize, from: usize },
    /// Replace every pipeline; used by joins and plan-level fallback.
    Replan { assignment: Vec<(u32, Vec<NodeId>)> },
}

/// Result of a non-exit reconfiguration.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconfigOutcome {
    pub new_state: ExecutionState,
    pub copy_plan: CopyPlan,
    pub downtime_ms: f64,
    pub actions: Vec<ReconfigAction>,
}

/// What a batch of failures led to.
#[derive(Debug, Clone, PartialEq)]
pub enum FailureOutcome {
    Reconfigured(Box<ReconfigOutcome>),
    /// Survivors dropped below `(f+1) * n0`: store progress and stop.
    ExitCheckpoint { survivors: BTreeSet<NodeId> },
}

// Working representation while actions are being decided/replayed.
#[derive(Debug, Clone)]
struct WorkPipeline {
    template_nodes: u32,
    nodes: Vec<NodeId>,
}

impl WorkPipeline {
    fn len(&self) -> u32 {
        self.nodes.len() as u32
    }

    fn broken(&self) -> bool {
        self.len() != self.template_nodes
    }
}

fn apply_action(work: &mut Vec<WorkPipeline>, action: &ReconfigAction) -> Result<()> {
    match action {
        ReconfigAction::DropNodes { failed } => {
            let failed: BTreeSet<NodeId> = failed.iter().copied().collect();
            for pipeline in work.iter_mut() {
                pipeline.nodes.retain(|n| !failed.contains(n));
            }
        }
        ReconfigAction::Reinstantiate {
            pipeline,
            template_nodes,
        } => {
            let p = &mut work[*pipeline];
            if p.len() != *template_nodes {
                return Err(Error::InvalidArgument(format!(
                    "reinstantiate: pipeline {pipeline} has {} nodes, template wants {template_nodes}",
                    p.len()
                )));
            }
            p.template_nodes = *template_nodes;
        }
        ReconfigAction::Borrow { from, to, count } => {
            let take = *count as usize;
            let from_len = work[*from].nodes.len();
            if take == 0 || take > from_len {
                return Err(Error::InvalidArgument("borrow count out of range".into()));
            }
            let moved: Vec<NodeId> = work[*from].nodes.split_off(from_len - take);
            work[*to].nodes.extend(moved);
        }
        ReconfigAction::Merge { into, from } => {
            if into == from || *from >= work.len() {
                return Err(Error::InvalidArgument("bad merge indices".into()));
            }
            let absorbed = work.remove(*from);
            let target = if *from < *into { *into - 1 } else { *into };
            work[target].nodes.extend(absorbed.nodes);
        }
        ReconfigAction::Replan { assignment } => {
            *work = assignment
                .iter()
                .map(|(template_nodes, nodes)| WorkPipeline {
                    template_nodes: *template_nodes,
                    nodes: nodes.clone(),
                })
                .collect();
        }
    }
    Ok(())
}

fn finish_state(
    work: &[WorkPipeline],
    env: &ReconfigEnv<'_>,
    job: &JobConfig,
) -> Result<ExecutionState> {
    let mut pipelines = Vec::with_capacity(work.len());
    let mut alive = BTreeSet::new();
    for wp in work {
        let template = env.templates.template(wp.template_nodes)?;
        alive.extend(wp.nodes.iter().copied());
        pipelines.push(PipelineInstance::from_template(template, wp.nodes.clone())?);
    }
    let times: Vec<f64> = pipelines
        .iter()
        .map(|p| Ok(env.templates.template(p.template_nodes)?.slowest_stage_ms()))
        .collect::<Result<_>>()?;
    let batch = distribute_batch(&times, job.global_batch, job.microbatch)?;
    Ok(ExecutionState {
        pipelines,
        spec: env.spec().clone(),
        job: *job,
        batch,
        alive,
    })
}

/// Replays an action list on a state; the result equals the outcome the
/// engine produced them from. Batch distribution is recomputed, which is
/// deterministic.
pub fn replay_actions(
    state: &ExecutionState,
    actions: &[ReconfigAction],
    env: &ReconfigEnv<'_>,
) -> Result<ExecutionState> {
    let mut work: Vec<WorkPipeline> = state
        .pipelines
        .iter()
        .map(|p| WorkPipeline {
            template_nodes: p.template_nodes,
            nodes: p.nodes.clone(),
        })
        .collect();
    for action in actions {
        apply_action(&mut work, action)?;
    }
    finish_state(&work, env, &state.job)
}

/// Merges two pipelines into one instantiated from the template matching
/// the combined size; `a`'s nodes come first.
pub fn merge_pipelines(
    a: &PipelineInstance,
    b: &PipelineInstance,
    ts: &TemplateSet,
) -> Result<PipelineInstance> {
    let merged = a.nodes.len() + b.nodes.len();
    let template = ts.template(merged as u32)?;
    let mut nodes = a.nodes.clone();
    nodes.extend(b.nodes.iter().copied());
    PipelineInstance::from_template(template, nodes)
}

/// Copies every layer a receiver is newly responsible for from a surviving
/// owner, preferring donors with the fewest outgoing transfers.
pub fn layer_copy_plan(
    old_state: &ExecutionState,
    new_state: &ExecutionState,
    env: &ReconfigEnv<'_>,
) -> Result<CopyPlan> {
    let old_owned = old_state.node_owned_layers(env.templates)?;
    let new_owned = new_state.node_owned_layers(env.templates)?;

    // Donor pool per layer: survivors that owned it before the change.
    let mut owners: Vec<Vec<NodeId>> = vec![Vec::new(); env.layer_count()];
    for (&node, layers) in &old_owned {
        if new_state.alive.contains(&node) {
            for &layer in layers {
                owners[layer].push(node);
            }
        }
    }

    let mut outgoing: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut transfers = Vec::new();
    for (&receiver, layers) in &new_owned {
        let had = old_owned.get(&receiver);
        for &layer in layers {
            if had.is_some_and(|set| set.contains(&layer)) {
                continue;
            }
            let donor = owners[layer]
                .iter()
                .copied()
                .filter(|&d| d != receiver)
                .min_by_key(|&d| (outgoing.get(&d).copied().unwrap_or(0), d))
                .ok_or(Error::Unrecoverable { layer })?;
            *outgoing.entry(donor).or_default() += 1;
            transfers.push(LayerTransfer {
                layer,
                donor,
                receiver,
                bytes: env.layer_state_bytes[layer],
            });
        }
    }
    Ok(CopyPlan { transfers })
}

/// Recovery downtime: fixed coordination latency plus the bandwidth-bound
/// copy time, with receiving pipelines loading in parallel and one inbound
/// stream each.
pub fn downtime_ms(copy_plan: &CopyPlan, new_state: &ExecutionState, cluster: &ClusterSpec) -> f64 {
    let mut node_pipeline: BTreeMap<NodeId, usize> = BTreeMap::new();
    for (idx, pipeline) in new_state.pipelines.iter().enumerate() {
        for &node in &pipeline.nodes {
            node_pipeline.insert(node, idx);
        }
    }
    let mut per_pipeline: BTreeMap<usize, u64> = BTreeMap::new();
    for transfer in &copy_plan.transfers {
        if let Some(&idx) = node_pipeline.get(&transfer.receiver) {
            *per_pipeline.entry(idx).or_default() += transfer.bytes;
        }
    }
    let slowest = per_pipeline
        .values()
        .map(|&bytes| bytes as f64 * 8.0 / (cluster.xfer_gbps * 1e6))
        .fold(0.0f64, f64::max);
    cluster.coord_overhead_ms + slowest
}

fn outcome_from_actions(
    state: &ExecutionState,
    work: &[WorkPipeline],
    actions: Vec<ReconfigAction>,
    env: &ReconfigEnv<'_>,
) -> Result<ReconfigOutcome> {
    let new_state = finish_state(work, env, &state.job)?;
    new_state.validate(env.templates, env.layer_count())?;
    let copy_plan = layer_copy_plan(state, &new_state, env)?;
    let downtime = downtime_ms(&copy_plan, &new_state, env.cluster);
    Ok(ReconfigOutcome {
        new_state,
        copy_plan,
        downtime_ms: downtime,
        actions,
    })
}

/// Applies a batch of simultaneous node failures.
pub fn apply_failures(
    state: &ExecutionState,
    failed: &BTreeSet<NodeId>,
    env: &ReconfigEnv<'_>,
) -> Result<FailureOutcome> {
    for node in failed {
        if !state.alive.contains(node) {
            return Err(Error::UnknownNode(node.0));
        }
    }
    let survivors: BTreeSet<NodeId> = state.alive.difference(failed).copied().collect();
    let floor = env.spec().replica_floor();
    if (survivors.len() as u32) < floor {
        return Ok(FailureOutcome::ExitCheckpoint { survivors });
    }

    let mut work: Vec<WorkPipeline> = state
        .pipelines
        .iter()
        .map(|p| WorkPipeline {
            template_nodes: p.template_nodes,
            nodes: p.nodes.clone(),
        })
        .collect();
    let mut actions = vec![ReconfigAction::DropNodes {
        failed: failed.iter().copied().collect(),
    }];
    apply_action(&mut work, &actions[0])?;

    let spec = env.spec().clone();
    // Repair broken pipelines smallest-first: the neediest are handled
    // while larger peers still have nodes to spare. A repaired pipeline is
    // always explicitly reinstantiated, even when its post-repair size
    // happens to match its old template, so the audit trail is complete.
    while let Some(idx) = (0..work.len())
        .filter(|&i| work[i].broken())
        .min_by_key(|&i| (work[i].len(), i))
    {
        let size = work[idx].len();
        if spec.has_size(size) {
            push_reinstantiate(&mut work, &mut actions, idx)?;
            continue;
        }
        if size < spec.n0 {
            // Borrow from the largest pipelines that stay at or above n0.
            let mut need = spec.n0 - size;
            let mut donors: Vec<usize> = (0..work.len())
                .filter(|&j| j != idx && work[j].len() > spec.n0)
                .collect();
            donors.sort_by_key(|&j| (std::cmp::Reverse(work[j].len()), j));
            let capacity: u32 = donors.iter().map(|&j| work[j].len() - spec.n0).sum();
            if capacity >= need {
                for j in donors {
                    if need == 0 {
                        break;
                    }
                    let take = need.min(work[j].len() - spec.n0);
                    if take == 0 {
                        continue;
                    }
                    let action = ReconfigAction::Borrow {
                        from: j,
                        to: idx,
                        count: take,
                    };
                    apply_action(&mut work, &action)?;
                    actions.push(action);
                    need -= take;
                }
                push_reinstantiate(&mut work, &mut actions, idx)?;
                continue;
            }
            // No spare capacity anywhere: merge with the smallest other
            // pipeline (possibly another broken one), repeatedly if the
            // merged pipeline is still too small.
            let partner = (0..work.len())
                .filter(|&j| j != idx)
                .min_by_key(|&j| (work[j].len(), j))
                .ok_or_else(|| {
                    Error::InvalidArgument("no merge partner for broken pipeline".into())
                })?;
            let action = ReconfigAction::Merge {
                into: idx,
                from: partner,
            };
            apply_action(&mut work, &action)?;
            actions.push(action);
            let idx = if partner < idx { idx - 1 } else { idx };
            let merged = work[idx].len();
            if merged >= spec.n0 {
                if !spec.has_size(merged) {
                    return replan_fallback(state, &survivors, env, actions);
                }
                push_reinstantiate(&mut work, &mut actions, idx)?;
            }
            continue;
        }
        // size > max template size: only reachable through joins growing a
        // pipeline past the original range; reselect the whole plan.
        return replan_fallback(state, &survivors, env, actions);
    }

    Ok(FailureOutcome::Reconfigured(Box::new(outcome_from_actions(
        state, &work, actions, env,
    )?)))
}

fn push_reinstantiate(
    work: &mut Vec<WorkPipeline>,
    actions: &mut Vec<ReconfigAction>,
    idx: usize,
) -> Result<()> {
    let action = ReconfigAction::Reinstantiate {
        pipeline: idx,
        template_nodes: work[idx].len(),
    };
    apply_action(work, &action)?;
    actions.push(action);
    Ok(())
}

fn replan_fallback(
    state: &ExecutionState,
    survivors: &BTreeSet<NodeId>,
    env: &ReconfigEnv<'_>,
    mut actions: Vec<ReconfigAction>,
) -> Result<FailureOutcome> {
    let plan = select_plan(env.templates, survivors.len() as u32, &state.job)?;
    let assignment = overlap_assignment(state, &plan, survivors, env)?;
    let action = ReconfigAction::Replan { assignment };
    let mut work = Vec::new();
    apply_action(&mut work, &action)?;
    actions.push(action);
    Ok(FailureOutcome::Reconfigured(Box::new(outcome_from_actions(
        state, &work, actions, env,
    )?)))
}

/// Adds freshly joined nodes: reselects the plan for the grown cluster and
/// reassigns nodes so existing (node, layer-range) pairs survive where
/// possible, bounding the copy volume.
pub fn apply_join(
    state: &ExecutionState,
    new_nodes: &BTreeSet<NodeId>,
    env: &ReconfigEnv<'_>,
) -> Result<ReconfigOutcome> {
    match apply_batch(state, &BTreeSet::new(), new_nodes, env)? {
        FailureOutcome::Reconfigured(outcome) => Ok(*outcome),
        // A pure join never shrinks the pool below the floor of a valid
        // state.
        FailureOutcome::ExitCheckpoint { .. } => unreachable!("join cannot exit"),
    }
}

/// Applies one coalesced batch of simultaneous failures and joins.
///
/// Pure-failure batches run the three-step repair; any batch containing
/// joins reselects the plan over the post-batch pool. Missing layers are
/// always copied from pre-batch owners that survived.
pub fn apply_batch(
    state: &ExecutionState,
    failed: &BTreeSet<NodeId>,
    joined: &BTreeSet<NodeId>,
    env: &ReconfigEnv<'_>,
) -> Result<FailureOutcome> {
    for node in joined {
        if state.alive.contains(node) {
            return Err(Error::NodeAlreadyAlive(node.0));
        }
    }
    if joined.is_empty() {
        if failed.is_empty() {
            return Ok(FailureOutcome::Reconfigured(Box::new(ReconfigOutcome {
                new_state: state.clone(),
                copy_plan: CopyPlan::default(),
                downtime_ms: 0.0,
                actions: Vec::new(),
            })));
        }
        return apply_failures(state, failed, env);
    }
    for node in failed {
        if !state.alive.contains(node) {
            return Err(Error::UnknownNode(node.0));
        }
    }
    let mut pool: BTreeSet<NodeId> = state.alive.difference(failed).copied().collect();
    pool.extend(joined.iter().copied());
    if (pool.len() as u32) < env.spec().replica_floor() {
        return Ok(FailureOutcome::ExitCheckpoint { survivors: pool });
    }
    let plan = select_plan(env.templates, pool.len() as u32, &state.job)?;
    let assignment = overlap_assignment(state, &plan, &pool, env)?;
    let mut actions = Vec::new();
    if !failed.is_empty() {
        actions.push(ReconfigAction::DropNodes {
            failed: failed.iter().copied().collect(),
        });
    }
    actions.push(ReconfigAction::Replan { assignment });
    let mut work = Vec::new();
    for action in &actions {
        apply_action(&mut work, action)?;
    }
    Ok(FailureOutcome::Reconfigured(Box::new(outcome_from_actions(
        state, &work, actions, env,
    )?)))
}

/// Greedy maximum-overlap node placement for a fresh plan: each slot takes
/// the unassigned node whose old layer ownership overlaps the slot's layer
/// set by the most bytes.
fn overlap_assignment(
    state: &ExecutionState,
    plan: &InstantiationPlan,
    pool: &BTreeSet<NodeId>,
    env: &ReconfigEnv<'_>,
) -> Result<Vec<(u32, Vec<NodeId>)>> {
    let old_owned = state.node_owned_layers(env.templates)?;
    let mut unassigned: BTreeSet<NodeId> = pool.clone();
    let mut assignment = Vec::with_capacity(plan.pipelines.len());
    for planned in &plan.pipelines {
        let template = env.templates.template(planned.template_nodes)?;
        // Layer set of each node slot in this template.
        let slots = {
            let probe = PipelineInstance::from_template(
                template,
                (0..template.nodes).map(NodeId).collect(),
            )?;
            probe.slot_layers(template)
        };
        let mut nodes = Vec::with_capacity(slots.len());
        for slot_layers in &slots {
            let best = unassigned
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    let score = |n: NodeId| -> u64 {
                        old_owned.get(&n).map_or(0, |owned| {
                            slot_layers
                                .iter()
                                .filter(|l| owned.contains(l))
                                .map(|&l| env.layer_state_bytes[l])
                                .sum()
                        })
                    };
                    score(a).cmp(&score(b)).then(b.cmp(&a))
                })
                .expect("pool covers the plan");
            unassigned.remove(&best);
            nodes.push(best);
        }
        assignment.push((planned.template_nodes, nodes));
    }
    debug_assert!(unassigned.is_empty(), "plan must use every node");
    Ok(assignment)
}

/// Per-layer allreduce peer groups: for every layer, the (pipeline, stage,
/// node) triple owning it in each pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncPeer {
    pub pipeline: usize,
    pub stage: usize,
    pub node: NodeId,
}

pub fn sync_groups(state: &ExecutionState, ts: &TemplateSet) -> Result<Vec<Vec<SyncPeer>>> {
    let layers = state
        .pipelines
        .first()
        .map(|p| ts.template(p.template_nodes).map(|t| t.layer_count()))
        .transpose()?
        .unwrap_or(0);
    let mut groups: Vec<Vec<SyncPeer>> = vec![Vec::new(); layers];
    for (pipeline_idx, pipeline) in state.pipelines.iter().enumerate() {
        let template = ts.template(pipeline.template_nodes)?;
        for (stage_idx, stage) in template.stages.iter().enumerate() {
            for group in &mut groups[stage.start..stage.end] {
                group.push(SyncPeer {
                    pipeline: pipeline_idx,
                    stage: stage_idx,
                    node: pipeline.stage_node_id(stage_idx),
                });
            }
        }
    }
    Ok(groups)
}
