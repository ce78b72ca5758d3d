//! One decoding step over a clustered vocabulary: open clusters in bound
//! order until a certificate holds or the token budget runs out, then
//! escalate through the fallback levels.

use serde::{Deserialize, Serialize};

use crate::bounds::{compute_bounds, BoundMode, BoundVector};
use crate::certify::{
    self, softmax_eps_certified, tightness, topk_certified, topp_certified, CertKind, CertState, CertStatus,
    Tightness,
};
use crate::cluster::ClusterIndex;
use crate::error::{Error, Result};
use crate::oracle::row_logit;
use crate::tensor_io::{l2_norm, EmbeddingTable};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_EPSILON: f64 = 0.05;
/// Budget as a fraction of V when `k_max` is left at 0.
pub const DEFAULT_BUDGET_FRACTION: f64 = 0.3;
pub const DEFAULT_EXPAND_CLUSTERS: usize = 4;
pub const DEFAULT_RELAX_FACTOR: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertTarget {
    Topk,
    SoftmaxEps,
    Topp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "level", rename_all = "snake_case")]
pub enum FallbackLevel {
    PartialExpand { clusters: usize },
    RelaxEps { factor: f64 },
    FullVocab,
}

/// Which fallback level produced the outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackUsed {
    PartialExpand,
    RelaxEps,
    FullVocab,
}

impl std::fmt::Display for FallbackUsed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FallbackUsed::PartialExpand => "partial_expand",
            FallbackUsed::RelaxEps => "relax_eps",
            FallbackUsed::FullVocab => "full_vocab",
        })
    }
}

/// Direction of the budget update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BudgetRule {
    /// `K (1 + alpha (rho_target - rho_fall))`: shrinks the budget while
    /// fallbacks are above target.
    #[default]
    Literal,
    /// `K (1 + alpha (rho_fall - rho_target))`: grows the budget while
    /// fallbacks are above target.
    Corrective,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveConfig {
    pub enabled: bool,
    pub rule: BudgetRule,
    pub alpha: f64,
    pub rho_target: f64,
    /// Half-life in steps of the fallback-rate moving average.
    pub half_life: f64,
    /// Leading steps of a sequence that run with a multiplied budget.
    pub warmup_steps: usize,
    pub warmup_factor: f64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self { enabled: false, rule: BudgetRule::Literal, alpha: 0.01, rho_target: 0.02, half_life: 100.0, warmup_steps: 4, warmup_factor: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub k: usize,
    pub epsilon: f64,
    /// Certificates to try, in order; the first that holds wins.
    pub targets: Vec<CertTarget>,
    /// Token budget; 0 selects `round(0.3 V)`.
    pub k_max: usize,
    /// Escalation levels; the full vocabulary is always the implicit last one.
    pub fallback: Vec<FallbackLevel>,
    pub adaptive: AdaptiveConfig,
    pub bound_mode: BoundMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            epsilon: DEFAULT_EPSILON,
            targets: vec![CertTarget::Topk, CertTarget::SoftmaxEps],
            k_max: 0,
            fallback: vec![
                FallbackLevel::PartialExpand { clusters: DEFAULT_EXPAND_CLUSTERS },
                FallbackLevel::RelaxEps { factor: DEFAULT_RELAX_FACTOR },
                FallbackLevel::FullVocab,
            ],
            adaptive: AdaptiveConfig::default(),
            bound_mode: BoundMode::Euclidean,
        }
    }
}

impl DecodeConfig {
    /// `k_max`, or the default fraction of the vocabulary when unset.
    pub fn resolved_k_max(&self, vocab_size: usize) -> usize {
        if self.k_max == 0 {
            ((DEFAULT_BUDGET_FRACTION * vocab_size as f64).round() as usize).clamp(self.k.min(vocab_size), vocab_size)
        } else {
            self.k_max
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k == 0 || self.k > vocab_size {
            return bad(format!("k = {} must lie in [1, {vocab_size}]", self.k));
        }
        let k_max = self.resolved_k_max(vocab_size);
        if k_max < self.k || k_max > vocab_size {
            return bad(format!("k_max = {k_max} must lie in [k = {}, V = {vocab_size}]", self.k));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon = {} must lie in (0, 1)", self.epsilon));
        }
        if self.targets.is_empty() {
            return bad("at least one certification target is required".into());
        }
        if self.adaptive.alpha.is_nan() || self.adaptive.alpha < 0.0 {
            return bad(format!("alpha = {} must be non-negative", self.adaptive.alpha));
        }
        if self.adaptive.half_life.is_nan() || self.adaptive.half_life <= 0.0 {
            return bad(format!("half_life = {} must be positive", self.adaptive.half_life));
        }
        for level in &self.fallback {
            if let FallbackLevel::RelaxEps { factor } = level {
                if factor.is_nan() || *factor < 1.0 {
                    return bad(format!("relax factor {factor} must be at least 1"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub bounds: u64,
    pub sparse: u64,
    pub full: u64,
    pub speedup_proxy: f64,
}

/// Two FLOPs per multiply-add: `2Cd` for bounds, `2|S|d` for the gathered
/// logits, `2Vd` for the dense product.
pub fn flop_accounting(sub_size: usize, num_clusters: usize, vocab_size: usize, hidden_dim: usize) -> FlopReport {
    let (s, c, v, d) = (sub_size as u64, num_clusters as u64, vocab_size as u64, hidden_dim as u64);
    let bounds = 2 * c * d;
    let sparse = 2 * s * d;
    let full = 2 * v * d;
    FlopReport { bounds, sparse, full, speedup_proxy: full as f64 / (bounds + sparse) as f64 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub clusters_opened: usize,
    pub sub_size: usize,
    /// Bound tightness at the decision point (before any fallback).
    pub tightness: Option<Tightness>,
    /// Clusters opened by the main loop, excluding fallback expansions.
    pub heap_pops: usize,
    pub flops: FlopReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutcome {
    /// Original token ids, in the order their clusters were opened.
    pub tokens: Vec<usize>,
    /// Exact logits matching `tokens`.
    pub logits: Vec<f64>,
    pub status: CertStatus,
    pub fallback: Option<FallbackUsed>,
    pub stats: StepStats,
}

impl DecodeOutcome {
    /// The k best sub-vocabulary ids by (logit desc, id asc).
    pub fn topk(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.tokens.len()).collect();
        idx.sort_by(|&a, &b| self.logits[b].total_cmp(&self.logits[a]).then(self.tokens[a].cmp(&self.tokens[b])));
        idx.into_iter().take(k).map(|i| self.tokens[i]).collect()
    }

    /// Certified without any fallback level.
    pub fn certified_directly(&self) -> bool {
        self.status.is_certified() && self.fallback.is_none()
    }
}

/// Pruned logit engine over one (table, index) pair. Rows are stored in
/// cluster order so every opened cluster is one contiguous slice.
#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    index: &'a ClusterIndex,
    vocab_size: usize,
    hidden_dim: usize,
    rows: Vec<f32>,
    biases: Vec<f32>,
    sizes: Vec<usize>,
    max_row_norm: f64,
    max_abs_bias: f64,
}

impl<'a> Decoder<'a> {
    pub fn new(table: &EmbeddingTable, index: &'a ClusterIndex) -> Result<Self> {
        if index.fingerprint != table.fingerprint() {
            return Err(Error::FingerprintMismatch);
        }
        let (v, d) = (table.vocab_size(), table.hidden_dim());
        let mut rows = Vec::with_capacity(v * d);
        let mut biases = Vec::with_capacity(v);
        for &tok in &index.permutation {
            rows.extend_from_slice(table.row(tok));
            biases.push(table.biases()[tok]);
        }
        let max_row_norm = (0..v)
            .map(|i| l2_norm(&table.row(i).iter().map(|&x| f64::from(x)).collect::<Vec<_>>()))
            .fold(0.0, f64::max);
        let max_abs_bias = table.biases().iter().map(|b| f64::from(b.abs())).fold(0.0, f64::max);
        let sizes = index.clusters.iter().map(|c| c.size()).collect();
        Ok(Self { index, vocab_size: v, hidden_dim: d, rows, biases, sizes, max_row_norm, max_abs_bias })
    }

    pub fn index(&self) -> &ClusterIndex {
        self.index
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn cluster_sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Margin covering the rounding of both the bound and the `f64` logit it
    /// is compared against.
    pub fn rounding_slack(&self, h_norm: f64) -> f64 {
        4.0 * (self.hidden_dim as f64 + 4.0) * f64::EPSILON * (self.max_row_norm * h_norm + self.max_abs_bias + 1.0)
    }

    pub fn bounds(&self, h: &[f64], mode: BoundMode) -> Result<BoundVector> {
        let h_norm = l2_norm(h);
        compute_bounds(self.index, h, h_norm, mode, self.rounding_slack(h_norm))
    }

    /// Exact logits of one cluster's members, in permuted order.
    pub fn cluster_logits(&self, cluster: usize, h: &[f64]) -> Vec<(usize, f64)> {
        let d = self.hidden_dim;
        self.index.clusters[cluster]
            .range()
            .map(|pos| {
                let row = &self.rows[pos * d..(pos + 1) * d];
                (self.index.permutation[pos], row_logit(row, self.biases[pos], h))
            })
            .collect()
    }

    fn open(&self, state: &mut CertState, cluster: usize, h: &[f64]) {
        state.open_cluster(cluster, self.cluster_logits(cluster, h));
    }

    fn check_dims(&self, h: &[f64], cfg: &DecodeConfig, k_max: usize) -> Result<()> {
        if h.len() != self.hidden_dim {
            return Err(Error::DimensionMismatch { expected: self.hidden_dim, actual: h.len() });
        }
        cfg.validate(self.vocab_size)?;
        if k_max < cfg.k || k_max > self.vocab_size {
            return Err(Error::Config(format!("budget {k_max} must lie in [{}, {}]", cfg.k, self.vocab_size)));
        }
        Ok(())
    }

    pub fn decode_step(&self, h: &[f64], cfg: &DecodeConfig) -> Result<DecodeOutcome> {
        self.decode_step_with_budget(h, cfg, cfg.resolved_k_max(self.vocab_size))
    }

    /// Incremental loop with an explicit token budget in place of `cfg.k_max`.
    pub fn decode_step_with_budget(&self, h: &[f64], cfg: &DecodeConfig, k_max: usize) -> Result<DecodeOutcome> {
        self.check_dims(h, cfg, k_max)?;
        let bounds = self.bounds(h, cfg.bound_mode)?;
        let mut state = CertState::new(&bounds, &self.sizes, cfg.k);
        let mut pops = 0;
        loop {
            if state.sub_len() > 0 {
                if let Some(kind) = check(&state, cfg, cfg.epsilon) {
                    return Ok(self.outcome(&state, kind, cfg.epsilon, None, pops, tightness(&state)));
                }
            }
            match state.next_unopened() {
                Some(c) if state.sub_len() + self.sizes[c] <= k_max => {
                    self.open(&mut state, c, h);
                    pops += 1;
                }
                _ => break,
            }
        }
        Ok(self.fall_back(state, h, cfg, pops))
    }

    /// One-shot variant: open the longest bound-order prefix that fits in
    /// `K_max`, certify once, then fall back.
    pub fn decode_step_batchselect(&self, h: &[f64], cfg: &DecodeConfig) -> Result<DecodeOutcome> {
        let k_max = cfg.resolved_k_max(self.vocab_size);
        self.check_dims(h, cfg, k_max)?;
        let bounds = self.bounds(h, cfg.bound_mode)?;
        let selected = top_clusters(&bounds, &self.sizes, k_max);
        let gathered: Vec<(usize, Vec<(usize, f64)>)> =
            selected.iter().map(|&c| (c, self.cluster_logits(c, h))).collect();
        Ok(self.finish_batch(&bounds, gathered, h, cfg))
    }

    /// Merges pre-gathered clusters (in selection order), certifies once and
    /// falls back on failure.
    pub(crate) fn finish_batch(
        &self,
        bounds: &BoundVector,
        gathered: Vec<(usize, Vec<(usize, f64)>)>,
        h: &[f64],
        cfg: &DecodeConfig,
    ) -> DecodeOutcome {
        let mut state = CertState::new(bounds, &self.sizes, cfg.k);
        let pops = gathered.len();
        for (c, logits) in gathered {
            state.open_cluster(c, logits);
        }
        if state.sub_len() > 0 {
            if let Some(kind) = check(&state, cfg, cfg.epsilon) {
                return self.outcome(&state, kind, cfg.epsilon, None, pops, tightness(&state));
            }
        }
        self.fall_back(state, h, cfg, pops)
    }

    fn fall_back(&self, mut state: CertState, h: &[f64], cfg: &DecodeConfig, pops: usize) -> DecodeOutcome {
        let xi = tightness(&state);
        for level in &cfg.fallback {
            match *level {
                FallbackLevel::PartialExpand { clusters } => {
                    for _ in 0..clusters {
                        match state.next_unopened() {
                            Some(c) => self.open(&mut state, c, h),
                            None => break,
                        }
                    }
                    if let Some(kind) = check(&state, cfg, cfg.epsilon) {
                        return self.outcome(&state, kind, cfg.epsilon, Some(FallbackUsed::PartialExpand), pops, xi);
                    }
                }
                FallbackLevel::RelaxEps { factor } => {
                    let relaxed = cfg.epsilon * factor;
                    if relaxed < 1.0 {
                        if let Some(kind) = check(&state, cfg, relaxed) {
                            return self.outcome(&state, kind, relaxed, Some(FallbackUsed::RelaxEps), pops, xi);
                        }
                    }
                }
                FallbackLevel::FullVocab => break,
            }
        }
        while let Some(c) = state.next_unopened() {
            self.open(&mut state, c, h);
        }
        self.outcome(&state, CertKind::TopkExact, cfg.epsilon, Some(FallbackUsed::FullVocab), pops, xi)
    }

    fn outcome(
        &self,
        state: &CertState,
        kind: CertKind,
        epsilon_target: f64,
        fallback: Option<FallbackUsed>,
        heap_pops: usize,
        xi: Option<Tightness>,
    ) -> DecodeOutcome {
        let (tokens, logits) = state.sub_logits().iter().copied().unzip();
        let sub_size = state.sub_len();
        DecodeOutcome {
            tokens,
            logits,
            status: certify::status(kind, state, epsilon_target),
            fallback,
            stats: StepStats {
                clusters_opened: state.num_opened(),
                sub_size,
                tightness: xi,
                heap_pops,
                flops: flop_accounting(sub_size, self.sizes.len(), self.vocab_size, self.hidden_dim),
            },
        }
    }
}

/// Longest prefix of the descending-bound order whose sizes sum to at most
/// `k_max`.
pub fn top_clusters(bounds: &BoundVector, sizes: &[usize], k_max: usize) -> Vec<usize> {
    let mut total = 0;
    let mut out = Vec::new();
    for c in bounds.descending_order() {
        if total + sizes[c] > k_max {
            break;
        }
        total += sizes[c];
        out.push(c);
    }
    out
}

fn check(state: &CertState, cfg: &DecodeConfig, eps: f64) -> Option<CertKind> {
    cfg.targets.iter().find_map(|t| {
        let ok = match t {
            CertTarget::Topk => topk_certified(state, cfg.k).certified,
            CertTarget::SoftmaxEps => softmax_eps_certified(state, eps).certified,
            CertTarget::Topp => topp_certified(state, eps).is_ok_and(|c| c.certified),
        };
        ok.then_some(match t {
            CertTarget::Topk => CertKind::TopkExact,
            CertTarget::SoftmaxEps => CertKind::SoftmaxEps,
            CertTarget::Topp => CertKind::ToppMass,
        })
    })
}

pub fn decode_step(table: &EmbeddingTable, index: &ClusterIndex, h: &[f64], cfg: &DecodeConfig) -> Result<DecodeOutcome> {
    Decoder::new(table, index)?.decode_step(h, cfg)
}

pub fn decode_step_batchselect(
    table: &EmbeddingTable,
    index: &ClusterIndex,
    h: &[f64],
    cfg: &DecodeConfig,
) -> Result<DecodeOutcome> {
    Decoder::new(table, index)?.decode_step_batchselect(h, cfg)
}

/// `round(K (1 + alpha (rho_target - rho_fall)))`, clamped to `[k, V]`
/// (sign flipped under [`BudgetRule::Corrective`]).
pub fn adapt_budget(k_max: usize, rho_fall: f64, cfg: &DecodeConfig, vocab_size: usize) -> usize {
    let next = (k_max as f64 * budget_factor(rho_fall, &cfg.adaptive)).round();
    (next.max(0.0) as usize).clamp(cfg.k, vocab_size)
}

fn budget_factor(rho_fall: f64, a: &AdaptiveConfig) -> f64 {
    match a.rule {
        BudgetRule::Literal => 1.0 + a.alpha * (a.rho_target - rho_fall),
        BudgetRule::Corrective => 1.0 + a.alpha * (rho_fall - a.rho_target),
    }
}

/// Sequential owner of the adaptive budget. The budget is kept as a real
/// number so that updates smaller than one token still accumulate.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetController {
    cfg: AdaptiveConfig,
    k_min: usize,
    vocab_size: usize,
    budget: f64,
    fallback_rate: f64,
    decay: f64,
    step_in_sequence: usize,
}

impl BudgetController {
    pub fn new(cfg: &DecodeConfig, vocab_size: usize) -> Self {
        Self {
            cfg: cfg.adaptive,
            k_min: cfg.k,
            vocab_size,
            budget: cfg.resolved_k_max(vocab_size) as f64,
            fallback_rate: 0.0,
            decay: 0.5f64.powf(1.0 / cfg.adaptive.half_life),
            step_in_sequence: 0,
        }
    }

    /// Budget for the next step, including the sequence warmup multiplier.
    pub fn budget(&self) -> usize {
        let base = self.base_budget() as f64;
        let scaled = if self.step_in_sequence < self.cfg.warmup_steps { base * self.cfg.warmup_factor } else { base };
        (scaled.round() as usize).clamp(self.k_min, self.vocab_size)
    }

    /// Budget without warmup.
    pub fn base_budget(&self) -> usize {
        (self.budget.round() as usize).clamp(self.k_min, self.vocab_size)
    }

    /// Moving-average fallback rate.
    pub fn fallback_rate(&self) -> f64 {
        self.fallback_rate
    }

    pub fn start_sequence(&mut self) {
        self.step_in_sequence = 0;
    }

    /// Records one step's outcome and, when enabled, updates the budget.
    pub fn observe(&mut self, fell_back: bool) {
        let x = if fell_back { 1.0 } else { 0.0 };
        self.fallback_rate = self.decay * self.fallback_rate + (1.0 - self.decay) * x;
        self.step_in_sequence += 1;
        if self.cfg.enabled {
            let next = self.budget * budget_factor(self.fallback_rate, &self.cfg);
            self.budget = next.clamp(self.k_min as f64, self.vocab_size as f64);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{build_index, BuildParams, ClusterMode};
    use crate::oracle::dense_logits;
    use crate::tensor_io::synth_mixture;

    fn cfg(k: usize, k_max: usize) -> DecodeConfig {
        DecodeConfig { k, k_max, ..DecodeConfig::default() }
    }

    #[test]
    fn single_cluster_opens_everything() {
        let m = synth_mixture(60, 8, 3, 0.2, 1).unwrap();
        let idx = build_index(&m.table, &BuildParams::new(1, ClusterMode::Euclidean)).unwrap();
        let h = vec![0.3; 8];
        let out = decode_step(&m.table, &idx, &h, &cfg(5, 60)).unwrap();
        assert_eq!(out.tokens.len(), 60);
        assert!(out.fallback.is_none());
        assert_eq!(out.status.kind, CertKind::TopkExact);
        assert_eq!(out.status.epsilon_achieved, 0.0);
    }

    /// Two far-apart groups; the query points at one token in the first.
    fn dominant_instance() -> (EmbeddingTable, ClusterIndex, Vec<f64>) {
        let mut w = Vec::new();
        for i in 0..5 {
            w.extend_from_slice(&[1.0 + 0.01 * i as f32, 0.0]);
        }
        for i in 0..5 {
            w.extend_from_slice(&[-1.0, 0.01 * i as f32]);
        }
        let t = EmbeddingTable::new(10, 2, w, vec![0.0; 10]).unwrap();
        let idx = build_index(&t, &BuildParams::new(2, ClusterMode::Euclidean).with_seed(4)).unwrap();
        (t, idx, vec![5.0, 0.0])
    }

    #[test]
    fn dominant_cluster_certifies_after_one_pop() {
        let (t, idx, h) = dominant_instance();
        let c = DecodeConfig { targets: vec![CertTarget::Topk], ..cfg(1, 10) };
        let out = decode_step(&t, &idx, &h, &c).unwrap();
        assert_eq!(out.stats.heap_pops, 1);
        assert_eq!(out.status.kind, CertKind::TopkExact);
        assert!(out.fallback.is_none());
        let dense = dense_logits(&t, &h).unwrap();
        assert_eq!(out.topk(1), dense.topk(1));

        let batch = decode_step_batchselect(&t, &idx, &h, &DecodeConfig { k_max: 5, ..c }).unwrap();
        assert_eq!(batch.topk(1), dense.topk(1));
        assert_eq!(batch.status.kind, CertKind::TopkExact);
    }

    #[test]
    fn gathered_logits_are_bit_equal_to_dense() {
        let m = synth_mixture(400, 16, 8, 0.1, 9).unwrap();
        let idx = build_index(&m.table, &BuildParams::new(12, ClusterMode::Euclidean)).unwrap();
        let dec = Decoder::new(&m.table, &idx).unwrap();
        let h: Vec<f64> = (0..16).map(|j| ((j * 7) as f64).cos() * 3.0).collect();
        let dense = dense_logits(&m.table, &h).unwrap();
        for out in [dec.decode_step(&h, &cfg(3, 200)).unwrap(), dec.decode_step_batchselect(&h, &cfg(3, 200)).unwrap()] {
            for (t, l) in out.tokens.iter().zip(&out.logits) {
                assert_eq!(l.to_bits(), dense.logits[*t].to_bits());
            }
        }
    }

    #[test]
    fn full_vocab_matches_dense() {
        let m = synth_mixture(300, 8, 6, 0.3, 2).unwrap();
        let idx = build_index(&m.table, &BuildParams::new(10, ClusterMode::Euclidean)).unwrap();
        let h = vec![0.1; 8];
        let c = DecodeConfig { fallback: vec![FallbackLevel::FullVocab], epsilon: 1e-12, ..cfg(1, 1) };
        let out = decode_step(&m.table, &idx, &h, &c).unwrap();
        assert_eq!(out.fallback, Some(FallbackUsed::FullVocab));
        assert_eq!(out.status.kind, CertKind::TopkExact);
        let dense = dense_logits(&m.table, &h).unwrap();
        let mut pairs: Vec<(usize, f64)> = out.tokens.iter().copied().zip(out.logits.iter().copied()).collect();
        pairs.sort_by_key(|p| p.0);
        assert_eq!(pairs.len(), 300);
        for (t, l) in pairs {
            assert_eq!(l.to_bits(), dense.logits[t].to_bits());
        }
    }

    #[test]
    fn relax_level_certifies_between_eps_and_twice_eps() {
        let m = synth_mixture(600, 16, 10, 0.1, 21).unwrap();
        let idx = build_index(&m.table, &BuildParams::new(20, ClusterMode::Euclidean)).unwrap();
        let dec = Decoder::new(&m.table, &idx).unwrap();
        let h: Vec<f64> = m.centers[0].iter().map(|&x| f64::from(x) * 12.0).collect();
        let sm = DecodeConfig { targets: vec![CertTarget::SoftmaxEps], fallback: vec![], ..cfg(1, 600) };
        // Record rho after each prefix of the bound order and pick a budget
        // whose rho sits in (eps, 2 eps] for some eps.
        let bounds = dec.bounds(&h, BoundMode::Euclidean).unwrap();
        let mut state = CertState::new(&bounds, dec.cluster_sizes(), 1);
        let mut found = None;
        for &c in &bounds.descending_order() {
            dec.open(&mut state, c, &h);
            let rho = state.residual_ratio();
            if rho > 0.0 && rho < 0.9 {
                found = Some((state.sub_len(), rho));
                break;
            }
        }
        let (budget, rho) = found.expect("some prefix has a usable rho");
        let eps = rho * 0.75;
        let relax = DecodeConfig {
            epsilon: eps,
            k_max: budget,
            fallback: vec![FallbackLevel::RelaxEps { factor: 2.0 }],
            ..sm.clone()
        };
        let out = dec.decode_step(&h, &relax).unwrap();
        assert_eq!(out.fallback, Some(FallbackUsed::RelaxEps));
        assert_eq!(out.status.kind, CertKind::SoftmaxEps);
        assert_eq!(out.status.epsilon_target, eps * 2.0);
        assert!(out.status.epsilon_achieved > eps && out.status.epsilon_achieved <= 2.0 * eps);
    }

    #[test]
    fn partial_expand_lowers_rho() {
        let m = synth_mixture(600, 16, 10, 0.2, 5).unwrap();
        let idx = build_index(&m.table, &BuildParams::new(30, ClusterMode::Euclidean)).unwrap();
        let dec = Decoder::new(&m.table, &idx).unwrap();
        let h: Vec<f64> = m.centers[3].iter().map(|&x| f64::from(x) * 4.0).collect();
        let base = DecodeConfig { epsilon: 1e-9, targets: vec![CertTarget::SoftmaxEps], fallback: vec![], ..cfg(1, 60) };
        let bounds = dec.bounds(&h, BoundMode::Euclidean).unwrap();
        let mut state = CertState::new(&bounds, dec.cluster_sizes(), 1);
        for c in top_clusters(&bounds, dec.cluster_sizes(), 60) {
            dec.open(&mut state, c, &h);
        }
        let before = state.residual_ratio();
        let expanded = DecodeConfig { fallback: vec![FallbackLevel::PartialExpand { clusters: 4 }], ..base };
        let out = dec.decode_step(&h, &expanded).unwrap();
        assert_eq!(out.fallback, Some(FallbackUsed::FullVocab));
        for _ in 0..4 {
            let c = state.next_unopened().unwrap();
            dec.open(&mut state, c, &h);
        }
        assert!(state.residual_ratio() < before);
    }

    #[test]
    fn budget_is_respected_without_fallback() {
        let m = synth_mixture(800, 16, 10, 0.2, 8).unwrap();
        let idx = build_index(&m.table, &BuildParams::new(25, ClusterMode::Euclidean)).unwrap();
        let dec = Decoder::new(&m.table, &idx).unwrap();
        for s in 0..20 {
            let h: Vec<f64> = (0..16).map(|j| ((s * 16 + j) as f64 * 1.3).sin() * 2.0).collect();
            let out = dec.decode_step(&h, &cfg(5, 200)).unwrap();
            if out.fallback.is_none() {
                assert!(out.tokens.len() <= 200);
            }
        }
    }

    #[test]
    fn config_validation() {
        let m = synth_mixture(50, 4, 2, 0.1, 1).unwrap();
        let idx = build_index(&m.table, &BuildParams::new(5, ClusterMode::Euclidean)).unwrap();
        let h = vec![0.0; 4];
        assert!(matches!(decode_step(&m.table, &idx, &h, &cfg(51, 50)), Err(Error::Config(_))));
        assert!(matches!(decode_step(&m.table, &idx, &h, &cfg(5, 51)), Err(Error::Config(_))));
        let bad_eps = DecodeConfig { epsilon: 1.0, ..cfg(5, 50) };
        assert!(matches!(decode_step(&m.table, &idx, &h, &bad_eps), Err(Error::Config(_))));
        assert!(matches!(decode_step(&m.table, &idx, &[0.0; 3], &cfg(5, 50)), Err(Error::DimensionMismatch { .. })));
        let other = synth_mixture(50, 4, 2, 0.1, 2).unwrap();
        assert!(matches!(Decoder::new(&other.table, &idx), Err(Error::FingerprintMismatch)));
    }

    #[test]
    fn flop_examples() {
        let f = flop_accounting(50257, 0, 50257, 12288);
        assert_eq!(f.full, 2 * 50257 * 12288);
        assert!((f.full as f64 / 2.0 - 6.176e8).abs() < 1e5);
        assert_eq!(f.speedup_proxy, 1.0);
        let g = flop_accounting(100, 10, 1000, 8);
        assert_eq!((g.bounds, g.sparse, g.full), (160, 1600, 16000));
    }

    #[test]
    fn adapt_budget_formula() {
        let c = DecodeConfig::default();
        assert_eq!(adapt_budget(1000, 0.12, &c, 5000), 999);
        assert_eq!(adapt_budget(1000, 0.02, &c, 5000), 1000);
        assert_eq!(adapt_budget(10, 1.0, &c, 5000), 10);
        assert_eq!(adapt_budget(5000, 0.0, &c, 5000), 5000);
        let flipped = DecodeConfig {
            adaptive: AdaptiveConfig { rule: BudgetRule::Corrective, ..Default::default() },
            ..DecodeConfig::default()
        };
        assert_eq!(adapt_budget(1000, 0.12, &flipped, 5000), 1001);
        assert_eq!(adapt_budget(1000, 0.02, &flipped, 5000), 1000);
    }

    #[test]
    fn literal_rule_shrinks_budget_under_persistent_fallback() {
        let c = DecodeConfig { adaptive: AdaptiveConfig { enabled: true, ..Default::default() }, ..cfg(10, 500) };
        let mut ctl = BudgetController::new(&c, 5000);
        for _ in 0..2000 {
            ctl.observe(true);
        }
        assert_eq!(ctl.base_budget(), 10);
        let fixed = DecodeConfig {
            adaptive: AdaptiveConfig { enabled: true, rule: BudgetRule::Corrective, ..Default::default() },
            ..cfg(10, 500)
        };
        let mut ctl = BudgetController::new(&fixed, 5000);
        for _ in 0..200 {
            ctl.observe(true);
        }
        assert!(ctl.base_budget() > 500);
    }

    #[test]
    fn unset_budget_defaults_to_fraction_of_vocab() {
        let c = DecodeConfig::default();
        assert_eq!(c.resolved_k_max(5000), 1500);
        assert_eq!(c.resolved_k_max(20), 10);
        assert_eq!(DecodeConfig { k: 30, ..c }.resolved_k_max(40), 30);
    }

    #[test]
    fn controller_warmup_and_ema() {
        let c = DecodeConfig { k_max: 100, adaptive: AdaptiveConfig { enabled: true, ..Default::default() }, ..cfg(10, 100) };
        let mut ctl = BudgetController::new(&c, 1000);
        assert_eq!(ctl.budget(), 200);
        for _ in 0..4 {
            ctl.observe(false);
        }
        assert_eq!(ctl.budget(), ctl.base_budget());
        for _ in 0..100 {
            ctl.observe(true);
        }
        assert!((ctl.fallback_rate() - 0.5).abs() < 0.01);
        ctl.start_sequence();
        assert!(ctl.budget() > ctl.base_budget());
    }

    #[test]
    fn config_json_roundtrip() {
        let c = DecodeConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<DecodeConfig>(&s).unwrap(), c);
        let partial: DecodeConfig = serde_json::from_str(r#"{"k": 3, "fallback": [{"level": "full_vocab"}]}"#).unwrap();
        assert_eq!(partial.k, 3);
        assert_eq!(partial.fallback, vec![FallbackLevel::FullVocab]);
        assert_eq!(partial.epsilon, DEFAULT_EPSILON);
    }
}
