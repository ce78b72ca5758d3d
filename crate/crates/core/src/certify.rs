//! Certification state and the three stopping tests (exact top-k, softmax
//! total-variation, top-p external mass).
//!
//! `Z_S` (the plain sum of `exp` over computed logits) and the residual
//! `R_hat = sum_{unopened c} |c| exp(U_c)` are both held as logarithms.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::bounds::BoundVector;
use crate::error::{Error, Result};

/// Merges between full recomputations of `log Z_S`.
pub const RECOMPUTE_INTERVAL: usize = 64;

#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Max-shifted log-sum-exp; `-inf` for an empty input.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.into_iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy)]
struct Logit(f64);

impl PartialEq for Logit {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Logit {}

impl PartialOrd for Logit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Logit {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Running state of one decoding step: which clusters are open, the exact
/// logits computed so far, and the log-domain partition sums.
#[derive(Debug, Clone)]
pub struct CertState {
    k: usize,
    bounds: Vec<f64>,
    sizes: Vec<usize>,
    opened: Vec<bool>,
    num_opened: usize,
    /// Cluster ids by descending bound.
    order: Vec<usize>,
    /// `suffix[i]` = log sum over `order[i..]` of `|c| exp(U_c)`.
    suffix: Vec<f64>,
    /// Clusters were opened strictly in `order`, so the residual is a suffix.
    in_order: bool,
    residual_override: Option<f64>,
    sub: Vec<(usize, f64)>,
    topk: BinaryHeap<Reverse<Logit>>,
    log_z: f64,
    merges_since_recompute: usize,
}

impl CertState {
    pub fn new(bounds: &BoundVector, sizes: &[usize], k: usize) -> Self {
        assert_eq!(bounds.len(), sizes.len(), "one size per bound");
        let order = bounds.descending_order();
        let mut suffix = vec![f64::NEG_INFINITY; order.len() + 1];
        for i in (0..order.len()).rev() {
            let c = order[i];
            let term = (sizes[c] as f64).ln() + bounds.values[c];
            suffix[i] = log_add_exp(suffix[i + 1], term);
        }
        Self {
            k,
            bounds: bounds.values.clone(),
            sizes: sizes.to_vec(),
            opened: vec![false; sizes.len()],
            num_opened: 0,
            order,
            suffix,
            in_order: true,
            residual_override: None,
            sub: Vec::new(),
            topk: BinaryHeap::with_capacity(k + 1),
            log_z: f64::NEG_INFINITY,
            merges_since_recompute: 0,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_clusters(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_opened(&self, cluster: usize) -> bool {
        self.opened[cluster]
    }

    pub fn num_opened(&self) -> usize {
        self.num_opened
    }

    pub fn all_opened(&self) -> bool {
        self.num_opened == self.sizes.len()
    }

    /// Computed `(token, logit)` pairs in the order they were merged.
    pub fn sub_logits(&self) -> &[(usize, f64)] {
        &self.sub
    }

    pub fn sub_len(&self) -> usize {
        self.sub.len()
    }

    /// Cluster ids by descending bound, ties by lower id.
    pub fn bound_order(&self) -> &[usize] {
        &self.order
    }

    /// Next unopened cluster in bound order.
    pub fn next_unopened(&self) -> Option<usize> {
        self.order.iter().copied().find(|&c| !self.opened[c])
    }

    /// Opens `cluster` and merges its exact logits.
    pub fn open_cluster(&mut self, cluster: usize, logits: impl IntoIterator<Item = (usize, f64)>) {
        assert!(!self.opened[cluster], "cluster {cluster} opened twice");
        if self.in_order && self.order[self.num_opened] != cluster {
            self.in_order = false;
        }
        self.opened[cluster] = true;
        self.num_opened += 1;
        for (token, logit) in logits {
            self.push_logit(token, logit);
        }
        self.residual_override = if self.in_order { None } else { Some(self.recompute_log_residual()) };
    }

    fn push_logit(&mut self, token: usize, logit: f64) {
        self.sub.push((token, logit));
        if self.k > 0 {
            if self.topk.len() < self.k {
                self.topk.push(Reverse(Logit(logit)));
            } else if let Some(Reverse(Logit(min))) = self.topk.peek() {
                if logit > *min {
                    self.topk.pop();
                    self.topk.push(Reverse(Logit(logit)));
                }
            }
        }
        self.log_z = log_add_exp(self.log_z, logit);
        self.merges_since_recompute += 1;
        if self.merges_since_recompute >= RECOMPUTE_INTERVAL {
            self.log_z = self.recompute_log_z();
            self.merges_since_recompute = 0;
        }
    }

    /// k-th largest computed logit, `-inf` while fewer than k are known.
    pub fn topk_min(&self) -> f64 {
        if self.k == 0 || self.topk.len() < self.k {
            f64::NEG_INFINITY
        } else {
            self.topk.peek().map_or(f64::NEG_INFINITY, |r| r.0 .0)
        }
    }

    /// `log Z_S`.
    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    pub fn recompute_log_z(&self) -> f64 {
        log_sum_exp(self.sub.iter().map(|&(_, l)| l))
    }

    /// `log R_hat` over clusters not yet opened.
    pub fn log_residual(&self) -> f64 {
        match self.residual_override {
            Some(r) => r,
            None => self.suffix[self.num_opened],
        }
    }

    pub fn recompute_log_residual(&self) -> f64 {
        log_sum_exp(
            (0..self.sizes.len())
                .filter(|&c| !self.opened[c])
                .map(|c| (self.sizes[c] as f64).ln() + self.bounds[c]),
        )
    }

    /// Largest bound among unopened clusters, `-inf` when all are open.
    pub fn unopened_max_bound(&self) -> f64 {
        match self.next_unopened() {
            Some(c) => self.bounds[c],
            None => f64::NEG_INFINITY,
        }
    }

    pub fn bound(&self, cluster: usize) -> f64 {
        self.bounds[cluster]
    }

    pub fn cluster_size(&self, cluster: usize) -> usize {
        self.sizes[cluster]
    }

    /// `R_hat / (Z_S + R_hat)`; 1 when nothing has been computed.
    pub fn residual_ratio(&self) -> f64 {
        let (lz, lr) = (self.log_z, self.log_residual());
        if lr == f64::NEG_INFINITY {
            return 0.0;
        }
        if lz == f64::NEG_INFINITY {
            return 1.0;
        }
        1.0 / (1.0 + (lz - lr).exp())
    }

    /// `R_hat / Z_S`.
    pub fn residual_over_mass(&self) -> f64 {
        let (lz, lr) = (self.log_z, self.log_residual());
        if lr == f64::NEG_INFINITY {
            return 0.0;
        }
        if lz == f64::NEG_INFINITY {
            return f64::INFINITY;
        }
        (lr - lz).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertKind {
    TopkExact,
    SoftmaxEps,
    ToppMass,
    Uncertified,
}

impl std::fmt::Display for CertKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CertKind::TopkExact => "topk_exact",
            CertKind::SoftmaxEps => "softmax_eps",
            CertKind::ToppMass => "topp_mass",
            CertKind::Uncertified => "uncertified",
        })
    }
}

/// Outcome of certification with the witnesses used to decide it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertStatus {
    pub kind: CertKind,
    /// `R_hat / (Z_S + R_hat)` at decision time; bounds both the TV distance
    /// and the probability mass outside the sub-vocabulary.
    pub epsilon_achieved: f64,
    /// Tolerance the decision was made against (after any relaxation).
    pub epsilon_target: f64,
    /// Largest unopened bound; `None` when every cluster is open.
    pub u_max: Option<f64>,
    /// k-th largest computed logit; `None` while fewer than k are known.
    pub topk_min: Option<f64>,
}

impl CertStatus {
    pub fn is_certified(&self) -> bool {
        self.kind != CertKind::Uncertified
    }
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopkCheck {
    pub certified: bool,
    pub u_max: f64,
    pub topk_min: f64,
}

/// Every unopened bound strictly below the k-th computed logit. Ties fail.
pub fn topk_certified(state: &CertState, k: usize) -> TopkCheck {
    let u_max = state.unopened_max_bound();
    let topk_min = if k == state.k() { state.topk_min() } else { kth_largest(state, k) };
    let certified = k >= 1 && state.sub_len() >= k && u_max < topk_min;
    TopkCheck { certified, u_max, topk_min }
}

fn kth_largest(state: &CertState, k: usize) -> f64 {
    if k == 0 || state.sub_len() < k {
        return f64::NEG_INFINITY;
    }
    let mut v: Vec<f64> = state.sub_logits().iter().map(|&(_, l)| l).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v[k - 1]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsCheck {
    pub certified: bool,
    /// `R_hat / (Z_S + R_hat)`.
    pub rho: f64,
}

/// `R_hat / (Z_S + R_hat) <= eps`.
pub fn softmax_eps_certified(state: &CertState, eps: f64) -> EpsCheck {
    let rho = state.residual_ratio();
    EpsCheck { certified: state.sub_len() >= 1 && rho <= eps, rho }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToppCheck {
    pub certified: bool,
    /// `R_hat / Z_S`.
    pub delta: f64,
    pub threshold: f64,
}

/// Largest `delta = R_hat / Z_S` that keeps external mass at most `eps`.
pub fn topp_threshold(eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Config(format!("top-p tolerance must lie in (0, 1), got {eps}")));
    }
    Ok(eps / (1.0 - eps))
}

/// `R_hat / Z_S <= eps / (1 - eps)`, which caps the true mass outside the
/// sub-vocabulary at `delta / (1 + delta) <= eps`.
pub fn topp_certified(state: &CertState, eps: f64) -> Result<ToppCheck> {
    let threshold = topp_threshold(eps)?;
    let delta = state.residual_over_mass();
    Ok(ToppCheck { certified: state.sub_len() >= 1 && delta <= threshold, delta, threshold })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tightness {
    pub xi: f64,
    /// The best unopened bound does not exceed the smallest computed logit.
    pub fully_dominated: bool,
}

/// `(max_S - min_S) / (U_max - min_S)`; `None` with fewer than two computed
/// logits or no unopened cluster.
pub fn tightness(state: &CertState) -> Option<Tightness> {
    if state.sub_len() < 2 || state.all_opened() {
        return None;
    }
    let (lo, hi) = state
        .sub_logits()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, l)| (lo.min(l), hi.max(l)));
    let u_max = state.unopened_max_bound();
    if u_max <= lo {
        return Some(Tightness { xi: 1.0, fully_dominated: true });
    }
    Some(Tightness { xi: (hi - lo) / (u_max - lo), fully_dominated: false })
}

pub(crate) fn status(kind: CertKind, state: &CertState, epsilon_target: f64) -> CertStatus {
    CertStatus {
        kind,
        epsilon_achieved: state.residual_ratio(),
        epsilon_target,
        u_max: finite(state.unopened_max_bound()),
        topk_min: finite(state.topk_min()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::BoundMode;
    use proptest::prelude::*;

    fn bv(values: Vec<f64>) -> BoundVector {
        BoundVector { values, mode: BoundMode::Euclidean, query_norm: 1.0, slack: 0.0 }
    }

    /// One opened cluster holding `logits`, then unopened clusters with the
    /// given (bound, size) pairs.
    fn state_with(logits: &[f64], unopened: &[(f64, usize)], k: usize) -> CertState {
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 100.0;
        let mut values = vec![top];
        let mut sizes = vec![logits.len()];
        for &(u, s) in unopened {
            values.push(u);
            sizes.push(s);
        }
        let mut st = CertState::new(&bv(values), &sizes, k);
        st.open_cluster(0, logits.iter().copied().enumerate());
        st
    }

    #[test]
    fn topk_strict_dominance_and_tie() {
        let st = state_with(&[5.0, 3.0, 1.0], &[(2.9, 1), (1.0, 1)], 2);
        let c = topk_certified(&st, 2);
        assert!(c.certified);
        assert_eq!(c.topk_min, 3.0);
        assert_eq!(c.u_max, 2.9);

        let st = state_with(&[5.0, 3.0, 1.0], &[(3.0, 1), (1.0, 1)], 2);
        assert!(!topk_certified(&st, 2).certified);
    }

    #[test]
    fn topk_needs_k_logits() {
        let st = state_with(&[5.0], &[(-10.0, 1)], 2);
        assert!(!topk_certified(&st, 2).certified);
    }

    #[test]
    fn softmax_eps_direct_arithmetic() {
        let st = state_with(&[0.0], &[(0.01f64.ln(), 2)], 1);
        let c = softmax_eps_certified(&st, 0.05);
        assert!((c.rho - 0.02 / 1.02).abs() < 1e-15);
        assert!(c.certified);
        assert!(!softmax_eps_certified(&st, 0.01).certified);
    }

    #[test]
    fn exhausted_residual_certifies() {
        let st = state_with(&[0.0, 1.0], &[], 1);
        assert_eq!(softmax_eps_certified(&st, 1e-9).rho, 0.0);
        assert!(softmax_eps_certified(&st, 1e-9).certified);
        let p = topp_certified(&st, 0.05).unwrap();
        assert_eq!(p.delta, 0.0);
        assert!(p.certified);
    }

    #[test]
    fn empty_state_never_certifies() {
        let st = CertState::new(&bv(vec![1.0, 0.0]), &[1, 1], 1);
        assert!(!softmax_eps_certified(&st, 0.5).certified);
        assert!(!topp_certified(&st, 0.5).unwrap().certified);
        assert!(!topk_certified(&st, 1).certified);
    }

    #[test]
    fn topp_threshold_formula() {
        assert!((topp_threshold(0.05).unwrap() - 0.052_631_578_947_368_42).abs() < 1e-15);
        assert!(topp_threshold(1.0).is_err());
        assert!(topp_threshold(0.0).is_err());
        let st = state_with(&[0.0], &[(0.01f64.ln(), 2)], 1);
        assert!(matches!(topp_certified(&st, 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn tightness_formula() {
        let st = state_with(&[4.0, 2.0, 1.0], &[(5.0, 1)], 1);
        let t = tightness(&st).unwrap();
        assert_eq!(t.xi, 0.75);
        assert!(!t.fully_dominated);

        let st = state_with(&[4.0, 1.0], &[(4.0, 1)], 1);
        assert_eq!(tightness(&st).unwrap().xi, 1.0);

        let st = state_with(&[4.0, 1.0], &[(0.5, 1)], 1);
        assert_eq!(tightness(&st).unwrap(), Tightness { xi: 1.0, fully_dominated: true });

        assert!(tightness(&state_with(&[4.0], &[(5.0, 1)], 1)).is_none());
        assert!(tightness(&state_with(&[4.0, 2.0], &[], 1)).is_none());
    }

    #[test]
    fn out_of_order_opening_recomputes_residual() {
        let mut st = CertState::new(&bv(vec![3.0, 2.0, 1.0]), &[2, 3, 4], 1);
        st.open_cluster(1, [(10, 0.5)]);
        let expect = log_sum_exp([2f64.ln() + 3.0, 4f64.ln() + 1.0]);
        assert!((st.log_residual() - expect).abs() < 1e-12);
        assert_eq!(st.unopened_max_bound(), 3.0);
        st.open_cluster(0, [(11, 0.1)]);
        assert!((st.log_residual() - (4f64.ln() + 1.0)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn streaming_log_z_matches_recomputation(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..400),
            chunk in 1usize..40,
        ) {
            let nclusters = logits.len().div_ceil(chunk);
            let values: Vec<f64> = (0..nclusters).map(|c| 100.0 - c as f64).collect();
            let sizes: Vec<usize> = (0..nclusters).map(|c| chunk.min(logits.len() - c * chunk)).collect();
            let mut st = CertState::new(&bv(values), &sizes, 5);
            let mut prev_rho = f64::INFINITY;
            let mut prev_res = f64::INFINITY;
            for c in 0..nclusters {
                let part: Vec<(usize, f64)> = logits[c * chunk..(c * chunk + sizes[c])]
                    .iter().copied().enumerate().map(|(i, l)| (c * chunk + i, l)).collect();
                st.open_cluster(c, part);
                let exact = st.recompute_log_z();
                prop_assert!((st.log_z() - exact).abs() <= 1e-10 * exact.abs().max(1.0));
                let res = st.log_residual();
                prop_assert!(res < prev_res || res == f64::NEG_INFINITY);
                prev_res = res;
                let rho = st.residual_ratio();
                prop_assert!(rho <= prev_rho);
                prev_rho = rho;
                let mut sorted: Vec<f64> = st.sub_logits().iter().map(|p| p.1).collect();
                sorted.sort_by(|a, b| b.total_cmp(a));
                let want = if sorted.len() >= 5 { sorted[4] } else { f64::NEG_INFINITY };
                prop_assert_eq!(st.topk_min(), want);
            }
        }
    }
}
