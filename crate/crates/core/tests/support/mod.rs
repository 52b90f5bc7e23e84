//! Independent oracles and scenario generators shared by the integration
//! suites. Everything here recomputes results from first principles and
//! stays off the library's search/memoization code paths.
//!
//! Each test binary uses its own subset of these helpers.
#![allow(dead_code)]

use pipeplan::profile::LayerProfileSet;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Device pool mirror for the oracle recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleAlloc {
    Whole(u32),
    Intra(u32),
}

/// Oracle solution: cost terms plus the flattened stage partition as
/// `(layer_start, layer_end, gpus)` triples.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub t1: f64,
    pub t3: f64,
    pub total: f64,
    pub kstar: usize,
    pub kstar_ms: f64,
    pub stages: Vec<(usize, usize, u32)>,
}

fn normalize(alloc: OracleAlloc, gpus_per_node: u32) -> OracleAlloc {
    match alloc {
        OracleAlloc::Whole(1) => OracleAlloc::Intra(gpus_per_node),
        other => other,
    }
}

fn feasible(stages: usize, span: usize, alloc: OracleAlloc, gpus_per_node: u32) -> bool {
    if stages == 0 || stages > span {
        return false;
    }
    match alloc {
        OracleAlloc::Whole(q) => stages >= q as usize && stages <= (q * gpus_per_node) as usize,
        OracleAlloc::Intra(r) => stages <= r as usize,
    }
}

fn splits(alloc: OracleAlloc, gpus_per_node: u32) -> Vec<(OracleAlloc, OracleAlloc)> {
    match alloc {
        OracleAlloc::Whole(q) => (1..q)
            .map(|j| {
                (
                    normalize(OracleAlloc::Whole(j), gpus_per_node),
                    normalize(OracleAlloc::Whole(q - j), gpus_per_node),
                )
            })
            .collect(),
        OracleAlloc::Intra(r) => (1..r)
            .map(|g| (OracleAlloc::Intra(g), OracleAlloc::Intra(r - g)))
            .collect(),
    }
}

/// Exhaustive, unmemoized recursion over every (layer split, device split,
/// stage split) combination with the declared tie-breaks: smaller layer
/// split, then smaller device split, then smaller left stage count; the
/// slowest stage resolves ties toward the smaller index.
pub fn oracle_solve(
    profile: &LayerProfileSet,
    stages: usize,
    u: usize,
    v: usize,
    alloc: OracleAlloc,
) -> Option<OracleSolution> {
    let m = profile.gpus_per_node;
    let alloc = normalize(alloc, m);
    if !feasible(stages, v - u, alloc, m) {
        return None;
    }
    if stages == 1 {
        let gpus = match alloc {
            OracleAlloc::Whole(_) => return None,
            OracleAlloc::Intra(r) => r,
        };
        let mut fwd = 0.0;
        let mut bwd = 0.0;
        for layer in &profile.layers[u..v] {
            fwd += layer.fwd_at(gpus);
            bwd += layer.bwd_at(gpus);
        }
        let fb = fwd + bwd;
        return Some(OracleSolution {
            t1: fb,
            t3: fb,
            total: 4.0 * fb,
            kstar: 0,
            kstar_ms: fb,
            stages: vec![(u, v, gpus)],
        });
    }
    let mut best: Option<OracleSolution> = None;
    for k in (u + 1)..v {
        for (left_alloc, right_alloc) in splits(alloc, m) {
            for s in 1..stages {
                let Some(left) = oracle_solve(profile, s, u, k, left_alloc) else {
                    continue;
                };
                let Some(right) = oracle_solve(profile, stages - s, k, v, right_alloc) else {
                    continue;
                };
                let t1 = left.t1 + right.t1;
                let (kstar, kstar_ms, in_left) = if left.kstar_ms >= right.kstar_ms {
                    (left.kstar, left.kstar_ms, true)
                } else {
                    (s + right.kstar, right.kstar_ms, false)
                };
                let t3 = if in_left { left.t3 + right.t1 } else { right.t3 };
                let total = t1 + (3 * stages + kstar - 1) as f64 * kstar_ms + t3;
                if best.as_ref().is_none_or(|b| total < b.total) {
                    let mut flat = left.stages.clone();
                    flat.extend(right.stages.iter().copied());
                    best = Some(OracleSolution {
                        t1,
                        t3,
                        total,
                        kstar,
                        kstar_ms,
                        stages: flat,
                    });
                }
            }
        }
    }
    best
}

/// Oracle for the whole-model mapping at a given stage count.
pub fn oracle_map(profile: &LayerProfileSet, nodes: u32, stages: usize) -> Option<OracleSolution> {
    oracle_solve(
        profile,
        stages,
        0,
        profile.layer_count(),
        OracleAlloc::Whole(nodes),
    )
}

/// Brute-force pipeline-set enumeration: nested bounded loops over every
/// count, keeping vectors that use all nodes with enough pipelines.
pub fn brute_force_sets(sizes: &[u32], nodes: u32, min_pipelines: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut counts = vec![0u32; sizes.len()];
    fn rec(
        sizes: &[u32],
        idx: usize,
        remaining: u32,
        min_pipelines: u32,
        counts: &mut Vec<u32>,
        out: &mut Vec<Vec<u32>>,
    ) {
        if idx == sizes.len() {
            if remaining == 0 && counts.iter().sum::<u32>() >= min_pipelines {
                out.push(counts.clone());
            }
            return;
        }
        for x in 0..=(remaining / sizes[idx]) {
            counts[idx] = x;
            rec(
                sizes,
                idx + 1,
                remaining - x * sizes[idx],
                min_pipelines,
                counts,
                out,
            );
        }
        counts[idx] = 0;
    }
    rec(sizes, 0, nodes, min_pipelines, &mut counts, &mut out);
    out.sort();
    out
}

/// Brute-force integer optimum of the completion-time variance objective
/// over every composition of `total` microbatches with one per pipeline.
pub fn brute_force_batch_objective(times: &[f64], total: u64) -> f64 {
    fn rec(times: &[f64], idx: usize, remaining: u64, picked: &mut Vec<u64>, best: &mut f64) {
        let x = times.len();
        if idx == x - 1 {
            picked.push(remaining);
            let completions: Vec<f64> = picked
                .iter()
                .zip(times)
                .map(|(&n, &t)| n as f64 * t)
                .collect();
            let mean = completions.iter().sum::<f64>() / x as f64;
            let objective: f64 = completions.iter().map(|c| (c - mean) * (c - mean)).sum();
            if objective < *best {
                *best = objective;
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
    assert!(total >= times.len() as u64);
    let mut best = f64::INFINITY;
    rec(times, 0, total, &mut Vec::new(), &mut best);
    best
}

/// Fresh reachability check used by the coverage suite.
pub fn representable(sizes: &[u32], target: u32) -> bool {
    let mut reach = vec![false; target as usize + 1];
    reach[0] = true;
    for total in 1..=target as usize {
        for &size in sizes {
            let size = size as usize;
            if size <= total && reach[total - size] {
                reach[total] = true;
                break;
            }
        }
    }
    reach[target as usize]
}

/// One randomized failure drive: explicit victim batches precomputed
/// against the evolving alive set, ending with the batch that pushes the
/// survivors below the replica floor.
#[derive(Debug, Clone)]
pub struct FailureScenario {
    pub layers: usize,
    pub nodes: u32,
    pub f: u32,
    pub n0: u32,
    pub batches: Vec<Vec<u32>>,
}

/// Deterministic scenario family for the randomized reconfiguration and
/// simulator suites. `f = 3` keeps every batch of up to three simultaneous
/// failures within the tolerance threshold, so each non-exit step must
/// succeed and stay recoverable.
pub fn failure_scenarios(count: usize, seed: u64) -> Vec<FailureScenario> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut scenarios = Vec::with_capacity(count);
    while scenarios.len() < count {
        let f = 3u32;
        let n0 = rng.gen_range(1..=3u32);
        let floor = (f + 1) * n0;
        let nodes = rng.gen_range(floor + 2..=floor + 8);
        let max_template = nodes - f * n0;
        let layers = (max_template as usize).max(4);
        let mut alive: Vec<u32> = (0..nodes).collect();
        let mut batches = Vec::new();
        while alive.len() as u32 >= floor {
            let size = rng.gen_range(1..=3usize).min(alive.len());
            let mut batch = Vec::with_capacity(size);
            for _ in 0..size {
                let idx = rng.gen_range(0..alive.len());
                batch.push(alive.swap_remove(idx));
            }
            batch.sort_unstable();
            batches.push(batch);
        }
        scenarios.push(FailureScenario {
            layers,
            nodes,
            f,
            n0,
            batches,
        });
    }
    scenarios
}
