//! Soundness suite run against a (table, index) pair: index statistics,
//! bound soundness, certified outcomes, the TV identity and sharding
//! transparency, all checked against the dense oracle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{validate_outcome, QueryGenerator, QueryModel};
use crate::bounds::BoundMode;
use crate::cluster::{validate_index, ClusterIndex};
use crate::decode::{DecodeConfig, Decoder};
use crate::error::Result;
use crate::oracle::{dense_logits, tv_distance};
use crate::shard::{make_plan, sharded_decode_step, LatencyModel, ShardStrategy};
use crate::tensor_io::EmbeddingTable;

/// Steps that also run the sharding comparison.
pub const SHARD_CHECK_STEPS: usize = 25;
pub const TV_IDENTITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    IndexStatistics,
    BoundSoundness,
    CertifiedOutcome,
    TvIdentity,
    ShardTransparency,
}

/// One failed check with enough context to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reproducer {
    pub check: CheckKind,
    pub step: Option<usize>,
    pub cluster: Option<usize>,
    pub token: Option<usize>,
    pub query: Option<Vec<f64>>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub steps: usize,
    pub seed: u64,
    pub bound_checks: u64,
    pub certified_steps: usize,
    pub violations: Vec<Reproducer>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Even steps draw random queries, odd steps contextual ones.
fn query_for(step: usize, random: &QueryGenerator, contextual: &QueryGenerator) -> Vec<f64> {
    if step.is_multiple_of(2) {
        random.query(step)
    } else {
        contextual.query(step)
    }
}

fn check_step(
    table: &EmbeddingTable,
    decoder: &Decoder,
    index: &ClusterIndex,
    cfg: &DecodeConfig,
    h: &[f64],
    step: usize,
) -> Result<(u64, bool, Vec<Reproducer>)> {
    let mut found = Vec::new();
    let repro = |check, cluster, token, detail: String| Reproducer {
        check,
        step: Some(step),
        cluster,
        token,
        query: Some(h.to_vec()),
        detail,
    };
    let dense = dense_logits(table, h)?;
    let mut checks = 0u64;
    for mode in [BoundMode::Euclidean, BoundMode::Spherical] {
        let bounds = decoder.bounds(h, mode)?;
        for c in 0..index.num_clusters() {
            for &t in index.members(c) {
                checks += 1;
                if dense.logits[t] > bounds.values[c] {
                    found.push(repro(
                        CheckKind::BoundSoundness,
                        Some(c),
                        Some(t),
                        format!("{mode} bound {} below logit {}", bounds.values[c], dense.logits[t]),
                    ));
                }
            }
        }
    }

    let out = decoder.decode_step(h, cfg)?;
    if let Err(detail) = validate_outcome(table, h, &out, cfg.k) {
        found.push(repro(CheckKind::CertifiedOutcome, None, None, detail));
    }
    let tv = tv_distance(&dense, &out.tokens)?;
    if (tv.direct - tv.closed_form).abs() > TV_IDENTITY_TOL * tv.closed_form + 1e-15 {
        found.push(repro(
            CheckKind::TvIdentity,
            None,
            None,
            format!("direct TV {} vs closed form {}", tv.direct, tv.closed_form),
        ));
    }

    if step < SHARD_CHECK_STEPS {
        let single = decoder.decode_step_batchselect(h, cfg)?;
        for workers in [2, 4, 8] {
            for strategy in ShardStrategy::ALL {
                let hot: Vec<f64> = index.clusters.iter().map(|m| m.size() as f64).collect();
                let plan = make_plan(index, workers, strategy, Some(&hot), step as u64)?;
                let r = sharded_decode_step(decoder, &plan, h, cfg, &LatencyModel::default())?;
                if r.outcome != single {
                    found.push(repro(
                        CheckKind::ShardTransparency,
                        None,
                        None,
                        format!("N={workers} {strategy} differs from the single-worker outcome"),
                    ));
                }
            }
        }
    }
    Ok((checks, out.certified_directly(), found))
}

pub fn run_suite(
    table: &EmbeddingTable,
    index: &ClusterIndex,
    cfg: &DecodeConfig,
    steps: usize,
    seed: u64,
) -> Result<VerifyReport> {
    let structural = validate_index(index, table)?;
    let mut violations: Vec<Reproducer> = structural
        .violations
        .iter()
        .map(|v| Reproducer {
            check: CheckKind::IndexStatistics,
            step: None,
            cluster: v.cluster,
            token: None,
            query: None,
            detail: format!("{:?}: {}", v.kind, v.detail),
        })
        .collect();
    if !structural.is_clean() {
        // Statistics are wrong, so downstream checks would only repeat it.
        return Ok(VerifyReport { steps, seed, bound_checks: 0, certified_steps: 0, violations });
    }
    let decoder = Decoder::new(table, index)?;
    cfg.validate(table.vocab_size())?;
    let random = QueryGenerator::new(QueryModel::Random { scale: 16.0 }, index, seed);
    let contextual = QueryGenerator::new(QueryModel::default(), index, seed);
    let per_step: Vec<(u64, bool, Vec<Reproducer>)> = (0..steps)
        .into_par_iter()
        .map(|s| check_step(table, &decoder, index, cfg, &query_for(s, &random, &contextual), s))
        .collect::<Result<_>>()?;
    let mut bound_checks = 0;
    let mut certified_steps = 0;
    for (checks, certified, found) in per_step {
        bound_checks += checks;
        certified_steps += usize::from(certified);
        violations.extend(found);
    }
    Ok(VerifyReport { steps, seed, bound_checks, certified_steps, violations })
}
