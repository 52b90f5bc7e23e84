//! Trace-driven resilience simulation.
//!
//! The simulator replays a node-availability trace against the planner and
//! the reconfiguration engine. The clock advances iteration by iteration on
//! the current plan's estimated iteration time; when an event batch lands
//! mid-iteration the in-flight partial progress is discarded (at most one
//! iteration is ever lost per event), the modeled recovery downtime
//! elapses, and training resumes on the new plan. Every iteration trains
//! exactly the configured global batch.
//!
//! Time is tracked in integer microseconds so that runs are reproducible
//! bit for bit and the effective-time breakdown is conserved exactly.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::plan::{select_plan, JobConfig};
use crate::profile::{min_nodes, ClusterSpec, LayerProfileSet};
use crate::reconfig::{apply_batch, ExecutionState, FailureOutcome, NodeId, ReconfigEnv};
use crate::template::{generate_template_set, TemplateSet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceEventKind {
    Fail,
    Join,
}

/// One availability change: `count` anonymous nodes or an explicit id list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t_s: f64,
    pub kind: TraceEventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<Vec<u32>>,
}

impl TraceEvent {
    fn validate(&self) -> Result<()> {
        if !self.t_s.is_finite() || self.t_s < 0.0 {
            return Err(Error::InvalidTrace(format!(
                "negative or non-finite timestamp {}",
                self.t_s
            )));
        }
        match (&self.count, &self.nodes) {
            (Some(c), None) if *c >= 1 => Ok(()),
            (None, Some(ids)) if !ids.is_empty() => Ok(()),
            _ => Err(Error::InvalidTrace(
                "event needs either count >= 1 or a non-empty node list".into(),
            )),
        }
    }
}

/// Events sharing a timestamp, applied as one simultaneous batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceBatch {
    pub t_s: f64,
    pub events: Vec<TraceEvent>,
}

/// Groups validated, time-ordered events into same-timestamp batches.
pub fn coalesce(events: Vec<TraceEvent>) -> Result<Vec<TraceBatch>> {
    let mut batches: Vec<TraceBatch> = Vec::new();
    let mut last = f64::NEG_INFINITY;
    for event in events {
        event.validate()?;
        if event.t_s < last {
            return Err(Error::InvalidTrace(format!(
                "timestamps must be non-decreasing: {} after {}",
                event.t_s, last
            )));
        }
        last = event.t_s;
        match batches.last_mut() {
            Some(batch) if batch.t_s == event.t_s => batch.events.push(event),
            _ => batches.push(TraceBatch {
                t_s: event.t_s,
                events: vec![event],
            }),
        }
    }
    Ok(batches)
}

/// Parses a JSON-lines trace file.
pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<TraceBatch>> {
    let raw = std::fs::read_to_string(path)?;
    trace_from_jsonl(&raw)
}

pub fn trace_from_jsonl(raw: &str) -> Result<Vec<TraceBatch>> {
    let mut events = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let event: TraceEvent = serde_json::from_str(line).map_err(|e| {
            Error::InvalidTrace(format!("line {}: {e}", lineno + 1))
        })?;
        events.push(event);
    }
    coalesce(events)
}

pub fn trace_to_jsonl(batches: &[TraceBatch]) -> String {
    let mut out = String::new();
    for batch in batches {
        for event in &batch.events {
            out.push_str(&serde_json::to_string(event).expect("event serializes"));
            out.push('\n');
        }
    }
    out
}

/// Full simulation input: the planning artifacts plus run parameters.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub templates: TemplateSet,
    pub layer_state_bytes: Vec<u64>,
    pub cluster: ClusterSpec,
    pub job: JobConfig,
    pub horizon_s: f64,
    pub seed: u64,
}

impl SimConfig {
    /// Builds templates from a profile, sizing `n0` from the memory model
    /// (utilization 0.8, one resident microbatch per GPU).
    pub fn from_profile(
        profile: &LayerProfileSet,
        cluster: ClusterSpec,
        job: JobConfig,
        horizon_s: f64,
        seed: u64,
    ) -> Result<SimConfig> {
        let n0 = min_nodes(profile, &cluster, 0.8, job.microbatch)?;
        Self::from_profile_with_n0(profile, cluster, job, n0, horizon_s, seed)
    }

    pub fn from_profile_with_n0(
        profile: &LayerProfileSet,
        cluster: ClusterSpec,
        job: JobConfig,
        n0: u32,
        horizon_s: f64,
        seed: u64,
    ) -> Result<SimConfig> {
        if !(horizon_s > 0.0) {
            return Err(Error::InvalidArgument("horizon_s must be > 0".into()));
        }
        job.validate()?;
        let templates = generate_template_set(profile, cluster.nodes, job.f, n0)?;
        Ok(SimConfig {
            templates,
            layer_state_bytes: profile.layer_state_bytes(),
            cluster,
            job,
            horizon_s,
            seed,
        })
    }

    pub fn env(&self) -> ReconfigEnv<'_> {
        ReconfigEnv {
            templates: &self.templates,
            layer_state_bytes: &self.layer_state_bytes,
            cluster: &self.cluster,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub t_s: f64,
    pub throughput_sps: f64,
    pub alive_nodes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t_s: f64,
    pub kind: String,
    pub downtime_ms: f64,
    pub copy_bytes: u64,
    pub lost_iteration_fraction: f64,
}

/// Fractions of elapsed time spent training, reconfiguring, and redoing
/// work lost to mid-iteration events. Sums to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub training: f64,
    pub reconfiguration: f64,
    pub fallback: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimExit {
    Completed,
    CheckpointExit { t_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub samples_trained: u64,
    pub avg_throughput_sps: f64,
    pub elapsed_s: f64,
    pub series: Vec<SeriesPoint>,
    pub events: Vec<EventRecord>,
    pub breakdown: Breakdown,
    pub exit: SimExit,
}

impl SimReport {
    pub fn series_csv(&self) -> String {
        let mut out = String::from("t_s,throughput_sps,alive_nodes\n");
        for point in &self.series {
            out.push_str(&format!(
                "{},{},{}\n",
                point.t_s, point.throughput_sps, point.alive_nodes
            ));
        }
        out
    }
}

/// Estimated steady throughput with no failures: the initial plan's
/// samples per second.
pub fn nofail_baseline(cfg: &SimConfig) -> Result<f64> {
    let plan = select_plan(&cfg.templates, cfg.cluster.nodes, &cfg.job)?;
    Ok(plan.throughput_sps)
}

const US_PER_S: f64 = 1e6;

fn to_us(seconds: f64) -> u64 {
    (seconds * US_PER_S).round() as u64
}

struct BatchEffect {
    failed: BTreeSet<NodeId>,
    joined: BTreeSet<NodeId>,
}

fn resolve_batch(
    batch: &TraceBatch,
    alive: &BTreeSet<NodeId>,
    next_node_id: &mut u32,
    rng: &mut ChaCha8Rng,
) -> Result<BatchEffect> {
    let mut failed: BTreeSet<NodeId> = BTreeSet::new();
    let mut joined: BTreeSet<NodeId> = BTreeSet::new();
    for event in &batch.events {
        match event.kind {
            TraceEventKind::Fail => match (&event.nodes, event.count) {
                (Some(ids), _) => {
                    for &id in ids {
                        if !alive.contains(&NodeId(id)) {
                            return Err(Error::UnknownNode(id));
                        }
                        failed.insert(NodeId(id));
                    }
                }
                (None, Some(count)) => {
                    // Uniform victims over the still-alive, not-yet-failed
                    // nodes, in sorted order for reproducibility.
                    let pool: Vec<NodeId> =
                        alive.iter().copied().filter(|n| !failed.contains(n)).collect();
                    let k = (count as usize).min(pool.len());
                    for idx in rand::seq::index::sample(rng, pool.len(), k) {
                        failed.insert(pool[idx]);
                    }
                }
                (None, None) => unreachable!("validated"),
            },
            TraceEventKind::Join => match (&event.nodes, event.count) {
                (Some(ids), _) => {
                    for &id in ids {
                        if alive.contains(&NodeId(id)) {
                            return Err(Error::NodeAlreadyAlive(id));
                        }
                        joined.insert(NodeId(id));
                        *next_node_id = (*next_node_id).max(id + 1);
                    }
                }
                (None, Some(count)) => {
                    for _ in 0..count {
                        joined.insert(NodeId(*next_node_id));
                        *next_node_id += 1;
                    }
                }
                (None, None) => unreachable!("validated"),
            },
        }
    }
    Ok(BatchEffect { failed, joined })
}

fn batch_kind(effect: &BatchEffect) -> &'static str {
    match (effect.failed.is_empty(), effect.joined.is_empty()) {
        (false, true) => "fail",
        (true, false) => "join",
        _ => "mixed",
    }
}

/// Replays a trace for `horizon_s` simulated seconds.
pub fn run_sim(cfg: &SimConfig, trace: &[TraceBatch]) -> Result<SimReport> {
    let env = cfg.env();
    let nodes = cfg.cluster.nodes;
    let plan = select_plan(&cfg.templates, nodes, &cfg.job)?;
    let ids: Vec<NodeId> = (0..nodes).map(NodeId).collect();
    let mut state = ExecutionState::instantiate(&cfg.templates, &plan, &ids, &cfg.job)?;
    let mut next_node_id = nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let horizon_us = to_us(cfg.horizon_s);
    let mut period_us = to_us(plan.iteration_ms / 1000.0).max(1);
    let mut throughput = plan.throughput_sps;

    // segment_start marks when the current uninterrupted training segment
    // began; the clock is implicit in event handling.
    let mut segment_start: u64 = 0;
    let mut training_us: u64 = 0;
    let mut reconfig_us: u64 = 0;
    let mut fallback_us: u64 = 0;
    let mut iterations: u64 = 0;

    let mut series = vec![SeriesPoint {
        t_s: 0.0,
        throughput_sps: throughput,
        alive_nodes: nodes,
    }];
    let push_point = |series: &mut Vec<SeriesPoint>, point: SeriesPoint| {
        match series.last_mut() {
            Some(last) if last.t_s == point.t_s => *last = point,
            _ => series.push(point),
        }
    };
    let mut events = Vec::new();
    let mut exit = SimExit::Completed;

    for batch in trace {
        let t_event = to_us(batch.t_s).max(segment_start);
        if t_event >= horizon_us {
            break;
        }
        // Complete iterations up to the event; the in-flight remainder is
        // discarded.
        let elapsed = t_event - segment_start;
        let full = elapsed / period_us;
        let partial = elapsed % period_us;
        iterations += full;
        training_us += full * period_us;
        fallback_us += partial;
        let lost_fraction = partial as f64 / period_us as f64;

        let effect = resolve_batch(batch, &state.alive, &mut next_node_id, &mut rng)?;
        match apply_batch(&state, &effect.failed, &effect.joined, &env)? {
            FailureOutcome::ExitCheckpoint { survivors } => {
                events.push(EventRecord {
                    t_s: t_event as f64 / US_PER_S,
                    kind: batch_kind(&effect).to_string(),
                    downtime_ms: 0.0,
                    copy_bytes: 0,
                    lost_iteration_fraction: lost_fraction,
                });
                push_point(
                    &mut series,
                    SeriesPoint {
                        t_s: t_event as f64 / US_PER_S,
                        throughput_sps: 0.0,
                        alive_nodes: survivors.len() as u32,
                    },
                );
                exit = SimExit::CheckpointExit {
                    t_s: t_event as f64 / US_PER_S,
                };
                segment_start = t_event;
                break;
            }
            FailureOutcome::Reconfigured(outcome) => {
                let downtime_us = to_us(outcome.downtime_ms / 1000.0);
                let resume = (t_event + downtime_us).min(horizon_us);
                reconfig_us += resume - t_event;
                events.push(EventRecord {
                    t_s: t_event as f64 / US_PER_S,
                    kind: batch_kind(&effect).to_string(),
                    downtime_ms: outcome.downtime_ms,
                    copy_bytes: outcome.copy_plan.total_bytes(),
                    lost_iteration_fraction: lost_fraction,
                });
                state = outcome.new_state;
                let iteration_ms = state
                    .pipelines
                    .iter()
                    .zip(&state.batch.microbatches)
                    .map(|(p, &mb)| {
                        Ok(cfg.templates.template(p.template_nodes)?.iteration_ms(mb))
                    })
                    .collect::<Result<Vec<f64>>>()?
                    .into_iter()
                    .fold(0.0f64, f64::max);
                period_us = to_us(iteration_ms / 1000.0).max(1);
                throughput = cfg.job.global_batch as f64 * 1000.0 / iteration_ms;
                segment_start = resume;
                push_point(
                    &mut series,
                    SeriesPoint {
                        t_s: resume as f64 / US_PER_S,
                        throughput_sps: throughput,
                        alive_nodes: state.alive.len() as u32,
                    },
                );
            }
        }
    }

    let elapsed_us = match exit {
        SimExit::Completed => {
            // Run out the horizon; the trailing in-flight fraction counts
            // as training time but yields no samples.
            let remaining = horizon_us - segment_start;
            let full = remaining / period_us;
            iterations += full;
            training_us += remaining;
            horizon_us
        }
        SimExit::CheckpointExit { .. } => segment_start,
    };

    let samples_trained = iterations * cfg.job.global_batch;
    debug_assert_eq!(training_us + reconfig_us + fallback_us, elapsed_us);
    let breakdown = if elapsed_us == 0 {
        Breakdown {
            training: 1.0,
            reconfiguration: 0.0,
            fallback: 0.0,
        }
    } else {
        Breakdown {
            training: training_us as f64 / elapsed_us as f64,
            reconfiguration: reconfig_us as f64 / elapsed_us as f64,
            fallback: fallback_us as f64 / elapsed_us as f64,
        }
    };
    let avg_throughput_sps = if elapsed_us == 0 {
        0.0
    } else {
        samples_trained as f64 * US_PER_S / elapsed_us as f64
    };
    Ok(SimReport {
        samples_trained,
        avg_throughput_sps,
        elapsed_s: elapsed_us as f64 / US_PER_S,
        series,
        events,
        breakdown,
        exit,
    })
}
