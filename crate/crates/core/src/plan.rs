//! Pipeline instantiation: enumerate feasible pipeline-set combinations,
//! balance the global batch across heterogeneous pipelines, and pick the
//! throughput-optimal plan.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::template::{NodeSpec, PipelineTemplate, TemplateSet};
use crate::{Error, Result};

/// User-facing job parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobConfig {
    pub f: u32,
    pub global_batch: u64,
    pub microbatch: u64,
}

impl JobConfig {
    pub fn validate(&self) -> Result<()> {
        if self.microbatch == 0 || self.global_batch < self.microbatch {
            return Err(Error::InvalidArgument(
                "require global_batch >= microbatch >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<JobConfig> {
        let raw = std::fs::read_to_string(path)?;
        let job: JobConfig = serde_json::from_str(&raw)?;
        job.validate()?;
        Ok(job)
    }
}

/// How many pipelines to instantiate from each template size: `counts[i]`
/// pipelines of `sizes[i]` nodes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeasibleSet {
    pub counts: Vec<u32>,
}

impl FeasibleSet {
    pub fn pipeline_count(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn nodes_used(&self, sizes: &[u32]) -> u32 {
        self.counts
            .iter()
            .zip(sizes)
            .map(|(&x, &n)| x * n)
            .sum()
    }

    /// Template size of each instantiated pipeline, smallest templates
    /// first.
    pub fn pipeline_sizes(&self, sizes: &[u32]) -> Vec<u32> {
        let mut out = Vec::new();
        for (&count, &size) in self.counts.iter().zip(sizes) {
            out.extend(std::iter::repeat_n(size, count as usize));
        }
        out
    }
}

/// Every counts vector that uses exactly `nodes` nodes with at least
/// `f + 1` pipelines, in lexicographic order.
///
/// Coin-change recursion: with the first `p'` template sizes, the lists
/// for `N'` nodes are those not using size `p'` concatenated with those
/// using it at least once (`X(p'-1, N')` followed by `X(p', N' - n_p')`
/// with `x_p'` bumped). Evaluated lazily so only the requested cell is
/// materialized.
pub fn enumerate_sets(spec: &NodeSpec, nodes: u32, f: u32) -> Result<Vec<FeasibleSet>> {
    let floor = (f + 1) * spec.n0;
    if nodes < floor {
        return Err(Error::InsufficientNodes { n: nodes, floor });
    }
    fn fill(sizes: &[u32], p: usize, remaining: u32, counts: &mut [u32], out: &mut Vec<Vec<u32>>) {
        if p == 0 {
            if remaining == 0 {
                out.push(counts.to_vec());
            }
            return;
        }
        fill(sizes, p - 1, remaining, counts, out);
        if remaining >= sizes[p - 1] {
            counts[p - 1] += 1;
            fill(sizes, p, remaining - sizes[p - 1], counts, out);
            counts[p - 1] -= 1;
        }
    }
    let sizes = &spec.sizes;
    let mut all = Vec::new();
    fill(sizes, sizes.len(), nodes, &mut vec![0; sizes.len()], &mut all);
    let mut out: Vec<FeasibleSet> = all
        .into_iter()
        .filter(|counts| counts.iter().sum::<u32>() > f)
        .map(|counts| FeasibleSet { counts })
        .collect();
    out.sort();
    debug_assert!(out.windows(2).all(|w| w[0] != w[1]), "duplicate counts");
    Ok(out)
}

/// Per-pipeline microbatch counts balancing completion times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchAssignment {
    /// `N_b,i`: microbatches given to each pipeline.
    pub microbatches: Vec<u64>,
    /// `N_b,i * T_i`: per-pipeline batch processing time.
    pub completion_ms: Vec<f64>,
    /// Sum of squared deviations of completion times from their mean.
    pub objective: f64,
}

impl BatchAssignment {
    pub fn total_microbatches(&self) -> u64 {
        self.microbatches.iter().sum()
    }
}

fn variance_objective(micro: &[u64], times: &[f64]) -> f64 {
    let x = micro.len() as f64;
    let completions: Vec<f64> = micro
        .iter()
        .zip(times)
        .map(|(&n, &t)| n as f64 * t)
        .collect();
    let mean = completions.iter().sum::<f64>() / x;
    completions.iter().map(|c| (c - mean) * (c - mean)).sum()
}

/// Smallest global batch `>= max(global_batch, pipelines * microbatch)`
/// that divides into at least one microbatch per pipeline.
pub fn recommend_batch(pipelines: u32, microbatch: u64, global_batch: u64) -> u64 {
    let needed = global_batch.div_ceil(microbatch).max(pipelines as u64);
    needed * microbatch
}

/// Instances with at most this many compositions are solved by exhaustive
/// enumeration. Four pipelines sharing 30 microbatches sit at 3,654
/// compositions, so the exhaustive path covers small plans with plenty of
/// margin while keeping per-candidate planning cheap.
const EXACT_ENUMERATION_LIMIT: u64 = 10_000;

fn composition_count(total: u64, x: usize) -> u64 {
    // C(total - 1, x - 1), saturating at the enumeration limit.
    let k = (x as u64 - 1).min(total - x as u64);
    let mut count: u64 = 1;
    for i in 0..k {
        count = count.saturating_mul(total - 1 - i) / (i + 1);
        if count > EXACT_ENUMERATION_LIMIT {
            return u64::MAX;
        }
    }
    count
}

/// Exhaustive search over compositions in lexicographic order; the first
/// optimum found (the lexicographically smallest) wins.
fn exact_assignment(times_ms: &[f64], total: u64) -> Vec<u64> {
    fn rec(
        times: &[f64],
        idx: usize,
        remaining: u64,
        picked: &mut Vec<u64>,
        best: &mut (f64, Vec<u64>),
    ) {
        let x = times.len();
        if idx == x - 1 {
            picked.push(remaining);
            let objective = variance_objective(picked, times);
            if objective < best.0 {
                *best = (objective, picked.clone());
            }
            picked.pop();
            return;
        }
        let slots_left = (x - idx - 1) as u64;
        for n in 1..=(remaining - slots_left) {
            picked.push(n);
            rec(times, idx + 1, remaining - n, picked, best);
            picked.pop();
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    rec(times_ms, 0, total, &mut Vec::new(), &mut best);
    best.1
}

/// Exact solution of the fixed-target separable problem: minimize
/// `sum((N_i T_i - target)^2)` subject to `sum(N_i) = total`, `N_i >= 1`.
/// Greedy marginal allocation is optimal because each term is convex in
/// `N_i`.
fn separable_assignment(times_ms: &[f64], total: u64, target: f64) -> Vec<u64> {
    let x = times_ms.len();
    let mut micro = vec![1u64; x];
    for _ in 0..(total - x as u64) {
        let best = (0..x)
            .min_by(|&a, &b| {
                let marginal = |i: usize| {
                    let t = times_ms[i];
                    t * t * (2 * micro[i] + 1) as f64 - 2.0 * t * target
                };
                marginal(a).partial_cmp(&marginal(b)).unwrap().then(a.cmp(&b))
            })
            .unwrap();
        micro[best] += 1;
    }
    micro
}

fn heuristic_assignment(times_ms: &[f64], total: u64) -> Vec<u64> {
    let x = times_ms.len();
    // Continuous optimum equalizes completions: N_i proportional to 1/T_i.
    let inv_sum: f64 = times_ms.iter().map(|t| 1.0 / t).sum();
    let mut micro: Vec<u64> = times_ms
        .iter()
        .map(|t| ((total as f64 / t) / inv_sum).floor().max(1.0) as u64)
        .collect();
    while micro.iter().sum::<u64>() > total {
        // Flooring plus the >=1 clamp can overshoot; walk it back from the
        // pipeline whose completion is largest.
        let victim = (0..x)
            .filter(|&i| micro[i] > 1)
            .max_by(|&a, &b| {
                (micro[a] as f64 * times_ms[a])
                    .partial_cmp(&(micro[b] as f64 * times_ms[b]))
                    .unwrap()
                    .then(b.cmp(&a))
            })
            .expect("total >= x keeps someone above 1");
        micro[victim] -= 1;
    }
    let mut residual = total - micro.iter().sum::<u64>();
    while residual > 0 {
        let best = (0..x)
            .min_by(|&a, &b| {
                let grow = |i: usize| {
                    let mut max = 0.0f64;
                    for j in 0..x {
                        let n = micro[j] + u64::from(j == i);
                        max = max.max(n as f64 * times_ms[j]);
                    }
                    max
                };
                grow(a).partial_cmp(&grow(b)).unwrap().then(a.cmp(&b))
            })
            .unwrap();
        micro[best] += 1;
        residual -= 1;
    }

    // Descent: best single-unit transfer, and re-solving the separable
    // problem at the current mean completion (which can hop across valleys
    // a single move cannot).
    let mut objective = variance_objective(&micro, times_ms);
    loop {
        let mut best_move: Option<(Vec<u64>, f64)> = None;
        for from in 0..x {
            if micro[from] <= 1 {
                continue;
            }
            for to in 0..x {
                if to == from {
                    continue;
                }
                micro[from] -= 1;
                micro[to] += 1;
                let candidate = variance_objective(&micro, times_ms);
                if candidate < best_move.as_ref().map_or(objective, |(_, o)| *o) {
                    best_move = Some((micro.clone(), candidate));
                }
                micro[from] += 1;
                micro[to] -= 1;
            }
        }
        let mean = micro
            .iter()
            .zip(times_ms)
            .map(|(&n, &t)| n as f64 * t)
            .sum::<f64>()
            / x as f64;
        let projected = separable_assignment(times_ms, total, mean);
        let projected_objective = variance_objective(&projected, times_ms);
        if projected_objective < best_move.as_ref().map_or(objective, |(_, o)| *o) {
            best_move = Some((projected, projected_objective));
        }
        match best_move {
            Some((next, next_objective)) if next_objective < objective => {
                micro = next;
                objective = next_objective;
            }
            _ => break,
        }
    }
    micro
}

/// Assigns `global_batch / microbatch` microbatches to pipelines with
/// per-microbatch steady costs `times_ms`, minimizing the variance of
/// completion times (equivalently, balancing pipelines against stragglers).
///
/// Small instances are solved exactly by enumeration (the lexicographically
/// smallest optimum wins). Larger instances start from the continuous
/// optimum (`N_b,i` proportional to `1 / T_i`), floor it, hand out the
/// residual to whichever pipeline's completion maximum grows least, and
/// then descend with single-unit transfers and mean-projection steps until
/// no move improves the objective. Ties resolve to the lower pipeline
/// index throughout.
pub fn distribute_batch(
    times_ms: &[f64],
    global_batch: u64,
    microbatch: u64,
) -> Result<BatchAssignment> {
    let x = times_ms.len();
    if x == 0 {
        return Err(Error::InvalidArgument("no pipelines".into()));
    }
    if times_ms.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::InvalidArgument(
            "per-microbatch times must be > 0".into(),
        ));
    }
    if microbatch == 0 || !global_batch.is_multiple_of(microbatch) {
        return Err(Error::IndivisibleBatch {
            global_batch,
            microbatch,
        });
    }
    let total = global_batch / microbatch;
    if total < x as u64 {
        return Err(Error::InfeasibleDistribution {
            microbatches: total,
            pipelines: x,
            recommended_global_batch: recommend_batch(x as u32, microbatch, global_batch),
        });
    }

    let micro = if composition_count(total, x) <= EXACT_ENUMERATION_LIMIT {
        exact_assignment(times_ms, total)
    } else {
        heuristic_assignment(times_ms, total)
    };
    let completion_ms: Vec<f64> = micro
        .iter()
        .zip(times_ms)
        .map(|(&n, &t)| n as f64 * t)
        .collect();
    let objective = variance_objective(&micro, times_ms);
    debug_assert_eq!(micro.iter().sum::<u64>() * microbatch, global_batch);
    Ok(BatchAssignment {
        microbatches: micro,
        completion_ms,
        objective,
    })
}

/// One instantiated pipeline within a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedPipeline {
    pub template_nodes: u32,
    pub microbatches: u64,
}

/// A throughput-evaluated choice of pipeline counts plus batch assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstantiationPlan {
    pub counts: Vec<u32>,
    pub pipelines: Vec<PlannedPipeline>,
    pub iteration_ms: f64,
    pub throughput_sps: f64,
    #[serde(skip)]
    pub batch: Option<BatchAssignment>,
}

impl InstantiationPlan {
    pub fn pipeline_count(&self) -> usize {
        self.pipelines.len()
    }
}

pub(crate) fn evaluate_candidate(
    ts: &TemplateSet,
    set: &FeasibleSet,
    job: &JobConfig,
) -> Result<InstantiationPlan> {
    let sizes = set.pipeline_sizes(&ts.spec.sizes);
    let templates: Vec<&PipelineTemplate> = sizes
        .iter()
        .map(|&n| ts.template(n))
        .collect::<Result<_>>()?;
    let times: Vec<f64> = templates.iter().map(|t| t.slowest_stage_ms()).collect();
    let batch = distribute_batch(&times, job.global_batch, job.microbatch)?;
    let iteration_ms = templates
        .iter()
        .zip(&batch.microbatches)
        .map(|(t, &n)| t.iteration_ms(n))
        .fold(0.0f64, f64::max);
    let throughput_sps = job.global_batch as f64 * 1000.0 / iteration_ms;
    Ok(InstantiationPlan {
        counts: set.counts.clone(),
        pipelines: sizes
            .iter()
            .zip(&batch.microbatches)
            .map(|(&n, &mb)| PlannedPipeline {
                template_nodes: n,
                microbatches: mb,
            })
            .collect(),
        iteration_ms,
        throughput_sps,
        batch: Some(batch),
    })
}

/// Evaluates every feasible set for `nodes` and returns the
/// maximum-throughput plan. Ties prefer fewer pipelines, then the
/// lexicographically smallest counts.
pub fn select_plan(ts: &TemplateSet, nodes: u32, job: &JobConfig) -> Result<InstantiationPlan> {
    job.validate()?;
    let candidates = enumerate_sets(&ts.spec, nodes, job.f)?;
    let mut best: Option<(InstantiationPlan, u32)> = None;
    let mut min_pipelines: Option<u32> = None;
    for set in &candidates {
        let x = set.pipeline_count();
        min_pipelines = Some(min_pipelines.map_or(x, |m| m.min(x)));
        let plan = match evaluate_candidate(ts, set, job) {
            Ok(plan) => plan,
            Err(Error::InfeasibleDistribution { .. }) => continue,
            Err(other) => return Err(other),
        };
        let better = match &best {
            None => true,
            Some((incumbent, inc_x)) => {
                plan.throughput_sps > incumbent.throughput_sps
                    || (plan.throughput_sps == incumbent.throughput_sps
                        && (x < *inc_x || (x == *inc_x && plan.counts < incumbent.counts)))
            }
        };
        if better {
            best = Some((plan, x));
        }
    }
    match best {
        Some((plan, _)) => Ok(plan),
        None => Err(Error::NoFeasiblePlan {
            recommended_global_batch: recommend_batch(
                min_pipelines.unwrap_or(job.f + 1),
                job.microbatch,
                job.global_batch,
            ),
        }),
    }
}

/// Every candidate with its throughput, for `plan --all` style inspection.
pub fn rank_plans(ts: &TemplateSet, nodes: u32, job: &JobConfig) -> Result<Vec<InstantiationPlan>> {
    job.validate()?;
    let candidates = enumerate_sets(&ts.spec, nodes, job.f)?;
    let mut plans = Vec::new();
    for set in &candidates {
        match evaluate_candidate(ts, set, job) {
            Ok(plan) => plans.push(plan),
            Err(Error::InfeasibleDistribution { .. }) => continue,
            Err(other) => return Err(other),
        }
    }
    plans.sort_by(|a, b| {
        b.throughput_sps
            .partial_cmp(&a.throughput_sps)
            .unwrap()
            .then(a.pipelines.len().cmp(&b.pipelines.len()))
            .then(a.counts.cmp(&b.counts))
    });
    Ok(plans)
}
