//! Workload generation, oracle-validated benchmark runs and report output.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::BoundMode;
use crate::certify::CertKind;
use crate::cluster::{build_index, default_cluster_count, BuildParams, ClusterIndex, ClusterMode, DEFAULT_BIAS_DEPTH, DEFAULT_ITERS};
use crate::decode::{flop_accounting, BudgetController, DecodeConfig, DecodeOutcome, Decoder, FallbackUsed};
use crate::error::{Error, Result};
use crate::oracle::{dense_logits, external_mass, tv_distance};
use crate::shard::{make_plan, sharded_decode_step, zipf_hotness, LatencyModel, ShardPlan, ShardStrategy};
use crate::tensor_io::{l2_norm, synth_mixture, EmbeddingTable};

pub const SCHEMA_VERSION: u32 = 1;

/// Relative rounding allowance when comparing oracle quantities against
/// certified tolerances.
pub const ORACLE_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub n_modes: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { vocab_size: 5000, hidden_dim: 64, n_modes: 50, spread: 0.5, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum QueryModel {
    /// `scale * g` with `g ~ N(0, I/d)`.
    Random { scale: f64 },
    /// `scale * normalize(mu_j + noise * g)` with cluster `j` drawn from a
    /// Zipf law over a seeded ranking of the clusters.
    Contextual { scale: f64, noise: f64, zipf_exponent: f64 },
}

impl Default for QueryModel {
    fn default() -> Self {
        QueryModel::Contextual { scale: 16.0, noise: 0.7, zipf_exponent: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Incremental,
    Batchselect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShardSettings {
    pub workers: usize,
    pub strategy: ShardStrategy,
    pub hotness_exponent: f64,
    pub latency: LatencyModel,
}

impl Default for ShardSettings {
    fn default() -> Self {
        Self { workers: 1, strategy: ShardStrategy::RoundRobin, hotness_exponent: 1.0, latency: LatencyModel::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub synth: SynthSpec,
    /// Cluster count; 0 selects `round(0.015 V)`.
    pub clusters: usize,
    pub cluster_mode: ClusterMode,
    pub cluster_iters: usize,
    pub bias_depth: usize,
    pub cluster_seed: u64,
    pub decode: DecodeConfig,
    pub steps: usize,
    pub query: QueryModel,
    pub seed: u64,
    pub variant: Variant,
    /// Runs each step through the sharding simulation (batch-select).
    pub shard: Option<ShardSettings>,
    /// Steps per sequence for the budget warmup; 0 means one sequence.
    pub sequence_length: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            clusters: 0,
            cluster_mode: ClusterMode::Euclidean,
            cluster_iters: DEFAULT_ITERS,
            bias_depth: DEFAULT_BIAS_DEPTH,
            cluster_seed: 0,
            decode: DecodeConfig::default(),
            steps: 2000,
            query: QueryModel::default(),
            seed: 0,
            variant: Variant::Incremental,
            shard: None,
            sequence_length: 0,
        }
    }
}

impl BenchConfig {
    pub fn cluster_count(&self, vocab_size: usize) -> usize {
        if self.clusters == 0 {
            default_cluster_count(vocab_size)
        } else {
            self.clusters
        }
    }

    pub fn build_params(&self, vocab_size: usize) -> BuildParams {
        BuildParams::new(self.cluster_count(vocab_size), self.cluster_mode)
            .with_iters(self.cluster_iters)
            .with_bias_depth(self.bias_depth)
            .with_seed(self.cluster_seed)
    }
}

/// Synthetic table and its index, built from the config.
pub fn prepare_workload(cfg: &BenchConfig) -> Result<(EmbeddingTable, ClusterIndex)> {
    let s = &cfg.synth;
    let table = synth_mixture(s.vocab_size, s.hidden_dim, s.n_modes, s.spread, s.seed)?.table;
    let index = build_index(&table, &cfg.build_params(table.vocab_size()))?;
    Ok((table, index))
}

/// Deterministic per-step query generator.
#[derive(Debug, Clone)]
pub struct QueryGenerator {
    model: QueryModel,
    dim: usize,
    seed: u64,
    directions: Vec<Vec<f64>>,
    /// Cumulative Zipf weights over `directions`.
    cumulative: Vec<f64>,
}

impl QueryGenerator {
    pub fn new(model: QueryModel, index: &ClusterIndex, seed: u64) -> Self {
        let dim = index.hidden_dim;
        let directions: Vec<Vec<f64>> = index.clusters.iter().map(|m| m.centroid[..dim].to_vec()).collect();
        let cumulative = match model {
            QueryModel::Contextual { zipf_exponent, .. } => {
                let w = zipf_hotness(directions.len(), zipf_exponent, seed);
                w.iter()
                    .scan(0.0, |acc, x| {
                        *acc += x;
                        Some(*acc)
                    })
                    .collect()
            }
            QueryModel::Random { .. } => Vec::new(),
        };
        Self { model, dim, seed, directions, cumulative }
    }

    /// Zipf weight per cluster (contextual model only).
    pub fn hotness(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.cumulative
            .iter()
            .map(|&c| {
                let w = c - prev;
                prev = c;
                w
            })
            .collect()
    }

    pub fn query(&self, step: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step as u64 + 1);
        let sd = 1.0 / (self.dim as f64).sqrt();
        let gauss = |rng: &mut ChaCha8Rng| -> f64 { rng.sample::<f64, _>(StandardNormal) * sd };
        match self.model {
            QueryModel::Random { scale } => (0..self.dim).map(|_| scale * gauss(&mut rng)).collect(),
            QueryModel::Contextual { scale, noise, .. } => {
                let total = *self.cumulative.last().unwrap_or(&1.0);
                let u = rng.random::<f64>() * total;
                let j = self.cumulative.partition_point(|&c| c <= u).min(self.directions.len() - 1);
                let mut h: Vec<f64> = self.directions[j].iter().map(|&m| m + noise * gauss(&mut rng)).collect();
                let n = l2_norm(&h);
                if n > 0.0 {
                    h.iter_mut().for_each(|x| *x *= scale / n);
                }
                h
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub ratio: f64,
    pub sub_size: usize,
    pub clusters_opened: usize,
    pub xi: Option<f64>,
    pub fully_dominated: bool,
    pub cert_kind: CertKind,
    pub fallback: Option<FallbackUsed>,
    pub rho: f64,
    pub epsilon_target: f64,
    pub budget: usize,
    /// Moving-average fallback rate after this step.
    pub fallback_ema: f64,
    pub flops_sparse: u64,
    pub flops_bounds: u64,
    pub speedup_proxy: f64,
    /// Oracle total variation of the renormalized sub-vocabulary softmax.
    pub tv: f64,
    pub external_mass: f64,
    pub bytes_bounds_phase: Option<u64>,
    pub bytes_logits_phase: Option<u64>,
    pub omega_comm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Summary {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

fn summarize(mut xs: Vec<f64>) -> Summary {
    if xs.is_empty() {
        return Summary::default();
    }
    xs.sort_by(f64::total_cmp);
    let q = |p: f64| xs[((p * (xs.len() - 1) as f64).round() as usize).min(xs.len() - 1)];
    Summary { mean: xs.iter().sum::<f64>() / xs.len() as f64, p50: q(0.5), p95: q(0.95) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Aggregates {
    pub steps: usize,
    pub ratio: Summary,
    pub xi: Summary,
    pub xi_count: usize,
    /// Certified without any fallback.
    pub rho_cert: f64,
    /// Any fallback level fired.
    pub rho_fall: f64,
    pub full_vocab_rate: f64,
    pub mean_sub_size: f64,
    pub mean_speedup_proxy: f64,
    /// `2Vd / (2Cd + 2 mean|S| d)`.
    pub speedup_at_mean: f64,
    pub cert_counts: Vec<(CertKind, usize)>,
    pub final_budget: usize,
    pub final_fallback_ema: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct OracleTally {
    pub checked: usize,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSummary {
    pub clusters: usize,
    pub mode: ClusterMode,
    pub mean_radius: f64,
    pub max_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: BenchConfig,
    pub table_fingerprint: String,
    pub index: IndexSummary,
    pub shard_plan: Option<ShardPlan>,
    pub aggregates: Aggregates,
    pub oracle: OracleTally,
    /// SHA-256 over every step's ids, logit bits, status and fallback.
    pub outcome_hash: String,
    pub records: Vec<StepRecord>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "ratio", "xi", "cert_kind", "fallback", "rho", "flops_sparse", "flops_bounds"])?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                r.ratio.to_string(),
                r.xi.map(|x| x.to_string()).unwrap_or_default(),
                r.cert_kind.to_string(),
                r.fallback.map_or("none".to_string(), |f| f.to_string()),
                r.rho.to_string(),
                r.flops_sparse.to_string(),
                r.flops_bounds.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut json = std::fs::File::create(dir.join("report.json"))?;
        json.write_all(self.to_json()?.as_bytes())?;
        json.write_all(b"\n")?;
        self.write_csv(std::fs::File::create(dir.join("report.csv"))?)
    }
}

fn hash_outcome(hasher: &mut Sha256, out: &DecodeOutcome) {
    hasher.update((out.tokens.len() as u64).to_le_bytes());
    for (t, l) in out.tokens.iter().zip(&out.logits) {
        hasher.update((*t as u64).to_le_bytes());
        hasher.update(l.to_bits().to_le_bytes());
    }
    hasher.update(out.status.kind.to_string().as_bytes());
    hasher.update(out.status.epsilon_achieved.to_bits().to_le_bytes());
    hasher.update(out.fallback.map_or("none".to_string(), |f| f.to_string()).as_bytes());
}

fn within(value: f64, limit: f64) -> bool {
    value <= limit * (1.0 + ORACLE_REL_TOL) + f64::MIN_POSITIVE
}

/// Checks one outcome against the dense oracle; returns the TV distance and
/// external mass, or a description of the first violation.
pub fn validate_outcome(
    table: &EmbeddingTable,
    h: &[f64],
    out: &DecodeOutcome,
    k: usize,
) -> std::result::Result<(f64, f64), String> {
    let dense = dense_logits(table, h).map_err(|e| e.to_string())?;
    for (t, l) in out.tokens.iter().zip(&out.logits) {
        if l.to_bits() != dense.logits[*t].to_bits() {
            return Err(format!("token {t}: gathered logit {l} differs from dense {}", dense.logits[*t]));
        }
    }
    let tv = tv_distance(&dense, &out.tokens).map_err(|e| e.to_string())?;
    let mass = external_mass(&dense, &out.tokens).map_err(|e| e.to_string())?;
    let rho = out.status.epsilon_achieved;
    if !within(tv.closed_form, rho) {
        return Err(format!("TV {} exceeds residual ratio {rho}", tv.closed_form));
    }
    let eps = out.status.epsilon_target;
    match out.status.kind {
        CertKind::TopkExact => {
            let mut got = out.topk(k);
            let mut want = dense.topk(k).to_vec();
            got.sort_unstable();
            want.sort_unstable();
            if got != want {
                return Err(format!("certified top-{k} {got:?} but dense top-{k} is {want:?}"));
            }
        }
        CertKind::SoftmaxEps if !within(tv.closed_form, eps) => {
            return Err(format!("certified softmax at eps {eps} but TV is {}", tv.closed_form));
        }
        CertKind::ToppMass if !within(mass, eps) => {
            return Err(format!("certified top-p at eps {eps} but external mass is {mass}"));
        }
        _ => {}
    }
    Ok((tv.closed_form, mass))
}

struct StepResult {
    outcome: DecodeOutcome,
    record: StepRecord,
}

fn run_step(
    table: &EmbeddingTable,
    decoder: &Decoder,
    plan: Option<(&ShardPlan, &LatencyModel)>,
    cfg: &BenchConfig,
    h: &[f64],
    step: usize,
    budget: usize,
) -> Result<StepResult> {
    let dcfg = DecodeConfig { k_max: budget, ..cfg.decode.clone() };
    let (outcome, ledger) = match (plan, cfg.variant) {
        (Some((plan, lat)), _) => {
            let r = sharded_decode_step(decoder, plan, h, &dcfg, lat)?;
            (r.outcome, Some(r.ledger))
        }
        (None, Variant::Incremental) => (decoder.decode_step(h, &dcfg)?, None),
        (None, Variant::Batchselect) => (decoder.decode_step_batchselect(h, &dcfg)?, None),
    };
    let (tv, mass) =
        validate_outcome(table, h, &outcome, dcfg.k).map_err(|detail| Error::OracleViolation { step, detail })?;
    let s = &outcome.stats;
    let record = StepRecord {
        step,
        ratio: s.sub_size as f64 / decoder.vocab_size() as f64,
        sub_size: s.sub_size,
        clusters_opened: s.clusters_opened,
        xi: s.tightness.map(|t| t.xi),
        fully_dominated: s.tightness.is_some_and(|t| t.fully_dominated),
        cert_kind: outcome.status.kind,
        fallback: outcome.fallback,
        rho: outcome.status.epsilon_achieved,
        epsilon_target: outcome.status.epsilon_target,
        budget,
        fallback_ema: 0.0,
        flops_sparse: s.flops.sparse,
        flops_bounds: s.flops.bounds,
        speedup_proxy: s.flops.speedup_proxy,
        tv,
        external_mass: mass,
        bytes_bounds_phase: ledger.map(|l| l.bytes_bounds_phase),
        bytes_logits_phase: ledger.map(|l| l.bytes_logits_phase),
        omega_comm: ledger.map(|l| l.omega_comm),
    };
    Ok(StepResult { outcome, record })
}

/// Runs `cfg.steps` oracle-validated decoding steps over `(table, index)`.
/// Any oracle violation aborts the run with [`Error::OracleViolation`].
pub fn run_benchmark(table: &EmbeddingTable, index: &ClusterIndex, cfg: &BenchConfig) -> Result<RunReport> {
    let decoder = Decoder::new(table, index)?;
    cfg.decode.validate(table.vocab_size())?;
    let queries = QueryGenerator::new(cfg.query, index, cfg.seed);
    let plan = match &cfg.shard {
        Some(s) => {
            let hot = match cfg.query {
                QueryModel::Contextual { .. } => queries.hotness(),
                QueryModel::Random { .. } => zipf_hotness(index.num_clusters(), s.hotness_exponent, cfg.seed),
            };
            Some(make_plan(index, s.workers, s.strategy, Some(&hot), cfg.seed)?)
        }
        None => None,
    };
    let plan_ref = plan.as_ref().zip(cfg.shard.as_ref().map(|s| &s.latency));

    let mut controller = BudgetController::new(&cfg.decode, table.vocab_size());
    let mut results: Vec<StepResult> = if cfg.decode.adaptive.enabled {
        let mut out = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            if cfg.sequence_length > 0 && step % cfg.sequence_length == 0 {
                controller.start_sequence();
            }
            let h = queries.query(step);
            let mut r = run_step(table, &decoder, plan_ref, cfg, &h, step, controller.budget())?;
            controller.observe(r.outcome.fallback.is_some());
            r.record.fallback_ema = controller.fallback_rate();
            out.push(r);
        }
        out
    } else {
        (0..cfg.steps)
            .into_par_iter()
            .map(|step| run_step(table, &decoder, plan_ref, cfg, &queries.query(step), step, cfg.decode.resolved_k_max(table.vocab_size())))
            .collect::<Result<_>>()?
    };
    if !cfg.decode.adaptive.enabled {
        for r in &mut results {
            controller.observe(r.outcome.fallback.is_some());
            r.record.fallback_ema = controller.fallback_rate();
        }
    }

    let mut hasher = Sha256::new();
    for r in &results {
        hash_outcome(&mut hasher, &r.outcome);
    }
    let records: Vec<StepRecord> = results.into_iter().map(|r| r.record).collect();
    let aggregates = aggregate(&records, index, table, &controller);
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        table_fingerprint: hex::encode(table.fingerprint()),
        index: IndexSummary {
            clusters: index.num_clusters(),
            mode: index.mode,
            mean_radius: index.mean_radius(),
            max_radius: index.max_radius(),
        },
        shard_plan: plan,
        oracle: OracleTally { checked: records.len(), violations: 0 },
        outcome_hash: hex::encode(hasher.finalize()),
        aggregates,
        records,
    })
}

fn aggregate(records: &[StepRecord], index: &ClusterIndex, table: &EmbeddingTable, ctl: &BudgetController) -> Aggregates {
    let n = records.len();
    if n == 0 {
        return Aggregates { final_budget: ctl.base_budget(), ..Aggregates::default() };
    }
    let frac = |f: &dyn Fn(&StepRecord) -> bool| records.iter().filter(|r| f(r)).count() as f64 / n as f64;
    let mean_sub = records.iter().map(|r| r.sub_size as f64).sum::<f64>() / n as f64;
    let (c, v, d) = (index.num_clusters() as f64, table.vocab_size() as f64, table.hidden_dim() as f64);
    let xis: Vec<f64> = records.iter().filter_map(|r| r.xi).collect();
    let mut cert_counts = Vec::new();
    for kind in [CertKind::TopkExact, CertKind::SoftmaxEps, CertKind::ToppMass, CertKind::Uncertified] {
        cert_counts.push((kind, records.iter().filter(|r| r.cert_kind == kind).count()));
    }
    Aggregates {
        steps: n,
        ratio: summarize(records.iter().map(|r| r.ratio).collect()),
        xi_count: xis.len(),
        xi: summarize(xis),
        rho_cert: frac(&|r| r.fallback.is_none() && r.cert_kind != CertKind::Uncertified),
        rho_fall: frac(&|r| r.fallback.is_some()),
        full_vocab_rate: frac(&|r| r.fallback == Some(FallbackUsed::FullVocab)),
        mean_sub_size: mean_sub,
        mean_speedup_proxy: records.iter().map(|r| r.speedup_proxy).sum::<f64>() / n as f64,
        speedup_at_mean: (2.0 * v * d) / (2.0 * c * d + 2.0 * mean_sub * d),
        cert_counts,
        final_budget: ctl.base_budget(),
        final_fallback_ema: ctl.fallback_rate(),
    }
}

/// Reference value of the FLOP proxy for a report: `2Vd / (2Cd + 2 mean|S| d)`.
pub fn speedup_at_mean(report: &RunReport) -> f64 {
    let f = flop_accounting(0, report.index.clusters, report.config.synth.vocab_size, report.config.synth.hidden_dim);
    let mean_sparse = 2.0 * report.aggregates.mean_sub_size * report.config.synth.hidden_dim as f64;
    f.full as f64 / (f.bounds as f64 + mean_sparse)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Clusters,
    Epsilon,
    KMax,
    BoundMode,
    ShardN,
}

impl std::str::FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "clusters" | "C" => Ok(AblationAxis::Clusters),
            "epsilon" | "eps" => Ok(AblationAxis::Epsilon),
            "k_max" => Ok(AblationAxis::KMax),
            "bound_mode" => Ok(AblationAxis::BoundMode),
            "shard_n" | "N" => Ok(AblationAxis::ShardN),
            other => Err(format!("unknown ablation axis '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub clusters: usize,
    pub mean_radius: f64,
    pub aggregates: Aggregates,
    pub outcome_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
    /// Broken monotonicity expectations; empty on a healthy build.
    pub failed_expectations: Vec<String>,
}

fn parse_value<T: std::str::FromStr>(axis: AblationAxis, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for axis {axis:?}")))
}

/// One benchmark per value on the same step stream, plus the monotonicity
/// checks that hold by construction.
pub fn ablation_sweep(
    table: &EmbeddingTable,
    axis: AblationAxis,
    values: &[String],
    base: &BenchConfig,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(values.len());
    let base_index = build_index(table, &base.build_params(table.vocab_size()))?;
    for v in values {
        let mut cfg = base.clone();
        let mut rebuilt = None;
        match axis {
            AblationAxis::Clusters => {
                cfg.clusters = parse_value(axis, v)?;
                rebuilt = Some(build_index(table, &cfg.build_params(table.vocab_size()))?);
            }
            AblationAxis::Epsilon => cfg.decode.epsilon = parse_value(axis, v)?,
            AblationAxis::KMax => cfg.decode.k_max = parse_value(axis, v)?,
            AblationAxis::BoundMode => cfg.decode.bound_mode = parse_value::<BoundMode>(axis, v)?,
            AblationAxis::ShardN => {
                let workers = parse_value(axis, v)?;
                cfg.shard = Some(ShardSettings { workers, ..cfg.shard.unwrap_or_default() });
            }
        }
        let index = rebuilt.as_ref().unwrap_or(&base_index);
        let report = run_benchmark(table, index, &cfg)?;
        rows.push(AblationRow {
            value: v.clone(),
            clusters: index.num_clusters(),
            mean_radius: index.mean_radius(),
            aggregates: report.aggregates,
            outcome_hash: report.outcome_hash,
        });
    }
    let mut failed_expectations = Vec::new();
    if matches!(axis, AblationAxis::Epsilon | AblationAxis::KMax) {
        let mut sorted: Vec<(f64, &AblationRow)> =
            rows.iter().map(|r| (r.value.parse::<f64>().unwrap_or(f64::NAN), r)).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in sorted.windows(2) {
            if w[1].1.aggregates.rho_cert < w[0].1.aggregates.rho_cert {
                failed_expectations.push(format!(
                    "rho_cert fell from {} at {} to {} at {}",
                    w[0].1.aggregates.rho_cert, w[0].1.value, w[1].1.aggregates.rho_cert, w[1].1.value
                ));
            }
        }
    }
    if axis == AblationAxis::ShardN {
        if let Some(first) = rows.first() {
            for r in &rows[1..] {
                if r.outcome_hash != first.outcome_hash {
                    failed_expectations.push(format!("outcome hash differs between N={} and N={}", first.value, r.value));
                }
            }
        }
    }
    Ok(AblationTable { axis, rows, failed_expectations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        BenchConfig {
            synth: SynthSpec { vocab_size: 800, hidden_dim: 16, n_modes: 12, spread: 0.3, seed: 3 },
            steps: 40,
            decode: DecodeConfig { k_max: 400, ..DecodeConfig::default() },
            ..BenchConfig::default()
        }
    }

    #[test]
    fn zero_steps_gives_empty_report() {
        let cfg = BenchConfig { steps: 0, ..small() };
        let (t, i) = prepare_workload(&cfg).unwrap();
        let r = run_benchmark(&t, &i, &cfg).unwrap();
        assert!(r.records.is_empty());
        assert_eq!(r.config, cfg);
        assert_eq!(r.oracle, OracleTally::default());
    }

    #[test]
    fn reports_are_deterministic() {
        let cfg = small();
        let (t, i) = prepare_workload(&cfg).unwrap();
        let a = run_benchmark(&t, &i, &cfg).unwrap().to_json().unwrap();
        let b = run_benchmark(&t, &i, &cfg).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let other = BenchConfig { seed: 1, ..cfg.clone() };
        assert_ne!(run_benchmark(&t, &i, &other).unwrap().outcome_hash, serde_json::from_str::<RunReport>(&a).unwrap().outcome_hash);
    }

    #[test]
    fn report_json_and_csv() {
        let cfg = small();
        let (t, i) = prepare_workload(&cfg).unwrap();
        let r = run_benchmark(&t, &i, &cfg).unwrap();
        let back: RunReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "step,ratio,xi,cert_kind,fallback,rho,flops_sparse,flops_bounds");
        assert_eq!(text.lines().count(), 41);
        let a = &r.aggregates;
        assert!((a.rho_cert + a.rho_fall - 1.0).abs() < 1e-12);
        assert!(r.records.iter().all(|s| s.ratio > 0.0 && s.ratio <= 1.0));
        assert!((speedup_at_mean(&r) - a.speedup_at_mean).abs() < 1e-12);
    }

    #[test]
    fn query_generator_is_stable_per_step() {
        let cfg = small();
        let (_, i) = prepare_workload(&cfg).unwrap();
        let g = QueryGenerator::new(cfg.query, &i, 5);
        assert_eq!(g.query(7), g.query(7));
        assert_ne!(g.query(7), g.query(8));
        let norm = l2_norm(&g.query(3));
        assert!((norm - 16.0).abs() < 1e-9);
        let r = QueryGenerator::new(QueryModel::Random { scale: 2.0 }, &i, 5);
        assert_eq!(r.query(1).len(), 16);
    }

    #[test]
    fn singleton_clusters_never_fall_back() {
        let cfg = BenchConfig { clusters: 800, steps: 20, ..small() };
        let (t, i) = prepare_workload(&cfg).unwrap();
        let r = run_benchmark(&t, &i, &cfg).unwrap();
        assert_eq!(r.aggregates.rho_fall, 0.0);
    }

    #[test]
    fn epsilon_sweep_is_monotone() {
        let cfg = small();
        let (t, _) = prepare_workload(&cfg).unwrap();
        let vals: Vec<String> = ["0.01", "0.05", "0.1", "0.2"].iter().map(|s| s.to_string()).collect();
        let table = ablation_sweep(&t, AblationAxis::Epsilon, &vals, &cfg).unwrap();
        assert_eq!(table.rows.len(), 4);
        assert!(table.failed_expectations.is_empty(), "{:?}", table.failed_expectations);
    }

    #[test]
    fn shard_sweep_keeps_outcomes() {
        let cfg = BenchConfig { variant: Variant::Batchselect, steps: 15, ..small() };
        let (t, _) = prepare_workload(&cfg).unwrap();
        let vals: Vec<String> = ["1", "2", "4"].iter().map(|s| s.to_string()).collect();
        let table = ablation_sweep(&t, AblationAxis::ShardN, &vals, &cfg).unwrap();
        assert!(table.failed_expectations.is_empty(), "{:?}", table.failed_expectations);
    }
}
