//! In-process simulation of cluster sharding across logical workers.
//!
//! Workers run one after another in id order within each phase. Bounds and
//! logits are computed per cluster, so the merged result equals the
//! single-worker batch-select step exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bounds::{cluster_bound, BoundVector};
use crate::cluster::{lloyd, ClusterIndex, DEFAULT_ITERS};
use crate::decode::{top_clusters, DecodeConfig, DecodeOutcome, Decoder};
use crate::error::{Error, Result};
use crate::tensor_io::l2_norm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardStrategy {
    RoundRobin,
    HotnessWeighted,
    SemanticGrouped,
}

impl ShardStrategy {
    pub const ALL: [ShardStrategy; 3] =
        [ShardStrategy::RoundRobin, ShardStrategy::HotnessWeighted, ShardStrategy::SemanticGrouped];
}

impl std::str::FromStr for ShardStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "round_robin" => Ok(ShardStrategy::RoundRobin),
            "hotness_weighted" => Ok(ShardStrategy::HotnessWeighted),
            "semantic_grouped" => Ok(ShardStrategy::SemanticGrouped),
            other => Err(format!("unknown shard strategy '{other}'")),
        }
    }
}

impl std::fmt::Display for ShardStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShardStrategy::RoundRobin => "round_robin",
            ShardStrategy::HotnessWeighted => "hotness_weighted",
            ShardStrategy::SemanticGrouped => "semantic_grouped",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub workers: usize,
    pub strategy: ShardStrategy,
    /// Worker id per cluster.
    pub assignment: Vec<usize>,
    /// Member tokens per worker.
    pub tokens: Vec<usize>,
    /// Per-worker load: summed hotness when weights were given, else tokens.
    pub load: Vec<f64>,
    /// Population standard deviation of `load`.
    pub load_std: f64,
}

impl ShardPlan {
    pub fn clusters_of(&self, worker: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignment.iter().enumerate().filter(move |(_, &w)| w == worker).map(|(c, _)| c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    fn validate(&self, index: &ClusterIndex) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("shard plan needs at least one worker".into()));
        }
        if self.assignment.len() != index.num_clusters() {
            return Err(Error::DimensionMismatch { expected: index.num_clusters(), actual: self.assignment.len() });
        }
        if let Some(&w) = self.assignment.iter().find(|&&w| w >= self.workers) {
            return Err(Error::Config(format!("cluster assigned to worker {w} of {}", self.workers)));
        }
        Ok(())
    }
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

pub fn make_plan(
    index: &ClusterIndex,
    workers: usize,
    strategy: ShardStrategy,
    hotness: Option<&[f64]>,
    seed: u64,
) -> Result<ShardPlan> {
    let c = index.num_clusters();
    if workers == 0 {
        return Err(Error::Config("worker count must be at least 1".into()));
    }
    if let Some(h) = hotness {
        if h.len() != c {
            return Err(Error::DimensionMismatch { expected: c, actual: h.len() });
        }
        if h.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("hotness weights must be finite and non-negative".into()));
        }
    }
    let sizes: Vec<usize> = index.clusters.iter().map(|m| m.size()).collect();
    let weights: Vec<f64> = match hotness {
        Some(h) => h.to_vec(),
        None => sizes.iter().map(|&s| s as f64).collect(),
    };

    let assignment = match strategy {
        ShardStrategy::RoundRobin => (0..c).map(|i| i % workers).collect(),
        ShardStrategy::HotnessWeighted => {
            let h = hotness.ok_or_else(|| Error::Config("hotness_weighted needs per-cluster hotness".into()))?;
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&a, &b| h[b].total_cmp(&h[a]).then(a.cmp(&b)));
            let mut load = vec![0.0f64; workers];
            let mut out = vec![0; c];
            for i in order {
                let w = (0..workers).min_by(|&a, &b| load[a].total_cmp(&load[b]).then(a.cmp(&b))).unwrap();
                out[i] = w;
                load[w] += h[i];
            }
            out
        }
        ShardStrategy::SemanticGrouped => {
            let dim = index.geometry_dim();
            let points: Vec<f64> = index.clusters.iter().flat_map(|m| m.centroid.iter().copied()).collect();
            lloyd(&points, dim, workers.min(c), DEFAULT_ITERS, false, seed)
        }
    };

    let mut tokens = vec![0; workers];
    let mut load = vec![0.0; workers];
    for (i, &w) in assignment.iter().enumerate() {
        tokens[w] += sizes[i];
        load[w] += weights[i];
    }
    let load_std = population_std(&load);
    Ok(ShardPlan { workers, strategy, assignment, tokens, load, load_std })
}

/// Unit costs of the abstract latency model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub flops_per_unit: f64,
    pub bytes_per_unit: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self { flops_per_unit: 1000.0, bytes_per_unit: 100.0 }
    }
}

/// Exchanged bytes and abstract latencies for one sharded step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    /// `4 C`: one `f32` bound per cluster.
    pub bytes_bounds_phase: u64,
    /// `|S| (2d + 4)`: a half-precision row plus a 4-byte id per token.
    pub bytes_logits_phase: u64,
    pub latency_bounds_phase: f64,
    pub latency_sparse_phase: f64,
    pub latency_comm: f64,
    /// Communication share of the total latency.
    pub omega_comm: f64,
}

impl CommLedger {
    pub fn total_bytes(&self) -> u64 {
        self.bytes_bounds_phase + self.bytes_logits_phase
    }

    pub fn total_latency(&self) -> f64 {
        self.latency_bounds_phase + self.latency_sparse_phase
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardedOutcome {
    pub outcome: DecodeOutcome,
    pub ledger: CommLedger,
}

/// Batch-select decoding executed phase by phase across the plan's workers.
pub fn sharded_decode_step(
    decoder: &Decoder,
    plan: &ShardPlan,
    h: &[f64],
    cfg: &DecodeConfig,
    latency: &LatencyModel,
) -> Result<ShardedOutcome> {
    let index = decoder.index();
    plan.validate(index)?;
    let d = decoder.hidden_dim();
    if h.len() != d {
        return Err(Error::DimensionMismatch { expected: d, actual: h.len() });
    }
    cfg.validate(decoder.vocab_size())?;
    let h_norm = l2_norm(h);
    let slack = decoder.rounding_slack(h_norm);
    let c = index.num_clusters();
    let workers: Vec<Vec<usize>> = (0..plan.workers).map(|w| plan.clusters_of(w).collect()).collect();

    // Bounds: each worker fills its own entries.
    let mut values = vec![f64::NAN; c];
    let mut bound_flops = vec![0u64; plan.workers];
    for (w, owned) in workers.iter().enumerate() {
        for &cl in owned {
            values[cl] = cluster_bound(index, cl, h, h_norm, cfg.bound_mode, slack);
        }
        bound_flops[w] = 2 * (owned.len() * d) as u64;
    }
    let bounds = BoundVector { values, mode: cfg.bound_mode, query_norm: h_norm, slack };

    // Global selection, then each worker gathers its selected clusters.
    let selected = top_clusters(&bounds, decoder.cluster_sizes(), cfg.resolved_k_max(decoder.vocab_size()));
    let mut gathered: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    let mut sparse_flops = vec![0u64; plan.workers];
    for (w, owned) in workers.iter().enumerate() {
        for &cl in owned.iter().filter(|cl| selected.contains(cl)) {
            let logits = decoder.cluster_logits(cl, h);
            sparse_flops[w] += 2 * (logits.len() * d) as u64;
            gathered.insert(cl, logits);
        }
    }
    let merged: Vec<(usize, Vec<(usize, f64)>)> =
        selected.iter().map(|&cl| (cl, gathered.remove(&cl).expect("every selected cluster is owned"))).collect();
    let outcome = decoder.finish_batch(&bounds, merged, h, cfg);

    let distributed = plan.workers > 1;
    let bytes_bounds_phase = if distributed { 4 * c as u64 } else { 0 };
    let bytes_logits_phase = if distributed { outcome.tokens.len() as u64 * (2 * d as u64 + 4) } else { 0 };
    let max_flops = |f: &[u64]| f.iter().copied().max().unwrap_or(0) as f64 / latency.flops_per_unit;
    let comm_bounds = bytes_bounds_phase as f64 / latency.bytes_per_unit;
    let comm_logits = bytes_logits_phase as f64 / latency.bytes_per_unit;
    let latency_bounds_phase = max_flops(&bound_flops) + comm_bounds;
    let latency_sparse_phase = max_flops(&sparse_flops) + comm_logits;
    let latency_comm = comm_bounds + comm_logits;
    let total = latency_bounds_phase + latency_sparse_phase;
    let omega_comm = if total > 0.0 { latency_comm / total } else { 0.0 };
    Ok(ShardedOutcome {
        outcome,
        ledger: CommLedger {
            bytes_bounds_phase,
            bytes_logits_phase,
            latency_bounds_phase,
            latency_sparse_phase,
            latency_comm,
            omega_comm,
        },
    })
}

/// `1 / (rank + 1)^s` per cluster, ranked by a seeded shuffle.
pub fn zipf_hotness(num_clusters: usize, exponent: f64, seed: u64) -> Vec<f64> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut ranks: Vec<usize> = (0..num_clusters).collect();
    ranks.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    ranks.iter().map(|&r| 1.0 / ((r + 1) as f64).powf(exponent)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{build_index, BuildParams, ClusterMode};
    use crate::tensor_io::synth_mixture;

    fn equal_clusters(n: usize) -> ClusterIndex {
        let mut w = Vec::new();
        for c in 0..n {
            for j in 0..2 {
                w.extend_from_slice(&[c as f32 * 10.0, j as f32 * 0.1]);
            }
        }
        let t = crate::tensor_io::EmbeddingTable::new(2 * n, 2, w, vec![0.0; 2 * n]).unwrap();
        build_index(&t, &BuildParams::new(n, ClusterMode::Euclidean).with_seed(3)).unwrap()
    }

    #[test]
    fn single_worker_plan() {
        let idx = equal_clusters(8);
        for s in [ShardStrategy::RoundRobin, ShardStrategy::SemanticGrouped] {
            let p = make_plan(&idx, 1, s, None, 0).unwrap();
            assert!(p.assignment.iter().all(|&w| w == 0));
            assert_eq!(p.load_std, 0.0);
        }
    }

    #[test]
    fn round_robin_balances_equal_clusters() {
        let idx = equal_clusters(8);
        let p = make_plan(&idx, 4, ShardStrategy::RoundRobin, None, 0).unwrap();
        assert_eq!(p.assignment, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(p.tokens, vec![4; 4]);
        assert_eq!(p.load_std, 0.0);
    }

    #[test]
    fn hotness_requires_weights() {
        let idx = equal_clusters(4);
        assert!(matches!(make_plan(&idx, 2, ShardStrategy::HotnessWeighted, None, 0), Err(Error::Config(_))));
        assert!(make_plan(&idx, 2, ShardStrategy::HotnessWeighted, Some(&[1.0; 3]), 0).is_err());
        assert!(make_plan(&idx, 0, ShardStrategy::RoundRobin, None, 0).is_err());
    }

    #[test]
    fn hotness_weighted_beats_round_robin_on_zipf() {
        let m = synth_mixture(2000, 16, 20, 0.1, 4).unwrap();
        let idx = build_index(&m.table, &BuildParams::new(30, ClusterMode::Euclidean)).unwrap();
        let hot = zipf_hotness(30, 1.1, 9);
        let rr = make_plan(&idx, 4, ShardStrategy::RoundRobin, Some(&hot), 0).unwrap();
        let hw = make_plan(&idx, 4, ShardStrategy::HotnessWeighted, Some(&hot), 0).unwrap();
        assert!(hw.load_std < rr.load_std, "{} vs {}", hw.load_std, rr.load_std);
    }

    #[test]
    fn semantic_plan_is_total() {
        let m = synth_mixture(1000, 8, 10, 0.1, 6).unwrap();
        let idx = build_index(&m.table, &BuildParams::new(20, ClusterMode::Euclidean)).unwrap();
        let p = make_plan(&idx, 4, ShardStrategy::SemanticGrouped, None, 1).unwrap();
        assert_eq!(p.assignment.len(), 20);
        assert_eq!(p.tokens.iter().sum::<usize>(), 1000);
        assert!(p.assignment.iter().all(|&w| w < 4));
    }

    #[test]
    fn sharding_is_transparent() {
        let m = synth_mixture(1500, 16, 15, 0.15, 12).unwrap();
        let idx = build_index(&m.table, &BuildParams::new(25, ClusterMode::Euclidean)).unwrap();
        let dec = Decoder::new(&m.table, &idx).unwrap();
        let hot = zipf_hotness(25, 1.0, 2);
        let cfg = DecodeConfig { k_max: 400, ..DecodeConfig::default() };
        let lat = LatencyModel::default();
        for s in 0..10 {
            let h: Vec<f64> = m.centers[s % 15].iter().map(|&x| f64::from(x) * 10.0).collect();
            let single = dec.decode_step_batchselect(&h, &cfg).unwrap();
            for n in [1, 2, 4, 8] {
                for strat in ShardStrategy::ALL {
                    let plan = make_plan(&idx, n, strat, Some(&hot), 0).unwrap();
                    let r = sharded_decode_step(&dec, &plan, &h, &cfg, &lat).unwrap();
                    assert_eq!(r.outcome, single);
                    if n == 1 {
                        assert_eq!(r.ledger.total_bytes(), 0);
                        assert_eq!(r.ledger.omega_comm, 0.0);
                    } else {
                        assert_eq!(r.ledger.bytes_bounds_phase, 4 * 25);
                        assert_eq!(r.ledger.bytes_logits_phase, single.tokens.len() as u64 * 36);
                        assert!(r.ledger.omega_comm > 0.0 && r.ledger.omega_comm < 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn plan_json_roundtrip() {
        let idx = equal_clusters(6);
        let p = make_plan(&idx, 3, ShardStrategy::RoundRobin, None, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.json");
        p.save(&path).unwrap();
        assert_eq!(ShardPlan::load(&path).unwrap(), p);
    }
}
