//! Per-cluster upper bounds on the largest member logit.
//!
//! Euclidean form: `U_c = <mu_c, h> + R_c * |h| + max_bias_c + slack`, from
//! Cauchy-Schwarz on `W_i - mu_c`. For bias-augmented indices the bias lives
//! in the extra coordinate, so the same expression is evaluated on `[h, 1]`
//! with no separate bias term.
//!
//! Cone form (spherical): every member lies within angle `theta_c` of the
//! centroid direction, so `<W_i, h> <= |W_i| |h| cos(max(0, phi_c - theta_c))`
//! where `phi_c` is the angle between `h` and the centroid. The cosine can be
//! negative, in which case the smallest member norm is the worst case. The
//! angle arithmetic goes through `atan2`, so the cone form carries a
//! forward-error allowance of `(d + 16) * eps * rho_c * |h|` which keeps it
//! above the `f64` dot product it is compared with.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::cluster::{angle_between, ClusterIndex, ClusterMeta, ClusterMode};
use crate::error::{Error, Result};
use crate::tensor_io::EmbeddingTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoundMode {
    #[default]
    Euclidean,
    Spherical,
}

impl std::str::FromStr for BoundMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "euclidean" => Ok(BoundMode::Euclidean),
            "spherical" => Ok(BoundMode::Spherical),
            other => Err(format!("unknown bound mode '{other}'")),
        }
    }
}

impl std::fmt::Display for BoundMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BoundMode::Euclidean => "euclidean",
            BoundMode::Spherical => "spherical",
        })
    }
}

/// Bounds for one query, one entry per cluster (index order).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundVector {
    pub values: Vec<f64>,
    pub mode: BoundMode,
    pub query_norm: f64,
    /// Safety margin already included in every value.
    pub slack: f64,
}

impl BoundVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Cluster ids by descending bound, ties by lower id.
    pub fn descending_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.values.len()).collect();
        order.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]).then(a.cmp(&b)));
        order
    }
}

/// Slack for 32-bit logit paths: a few ulps of the largest bound magnitude.
pub fn f32_slack(magnitude: f64) -> f64 {
    4.0 * f64::from(f32::EPSILON) * magnitude.abs()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn check_dim(index: &ClusterIndex, h: &[f64]) -> Result<()> {
    if h.len() != index.hidden_dim {
        return Err(Error::DimensionMismatch { expected: index.hidden_dim, actual: h.len() });
    }
    Ok(())
}

/// `<mu, h> + R |h|`, in bound space.
fn euclidean_geometric(meta: &ClusterMeta, mode: ClusterMode, h: &[f64], h_norm: f64) -> f64 {
    match mode {
        ClusterMode::BiasAugmented => {
            let d = h.len();
            let aug_norm = (h_norm * h_norm + 1.0).sqrt();
            (dot(&meta.centroid[..d], h) + meta.centroid[d]) + meta.radius * aug_norm
        }
        _ => dot(&meta.centroid, h) + meta.radius * h_norm,
    }
}

/// Bias term added on top of the geometric part (zero when the geometry
/// already carries the bias).
fn bias_term(meta: &ClusterMeta, mode: ClusterMode) -> f64 {
    match mode {
        ClusterMode::BiasAugmented => 0.0,
        _ => meta.max_bias,
    }
}

fn euclidean_single(meta: &ClusterMeta, mode: ClusterMode, h: &[f64], h_norm: f64, slack: f64) -> f64 {
    euclidean_geometric(meta, mode, h, h_norm) + bias_term(meta, mode) + slack
}

/// Cone part `max <W_i, h>` over the cluster, or `None` when the centroid
/// direction is undefined.
fn cone_geometric(meta: &ClusterMeta, h: &[f64], h_norm: f64) -> Option<f64> {
    let d = h.len();
    let direction = &meta.centroid[..d];
    if direction.iter().all(|&x| x == 0.0) {
        return None;
    }
    if h_norm == 0.0 {
        return Some(0.0);
    }
    let phi = angle_between(h, direction);
    let cos = (phi - meta.angular_radius).max(0.0).cos();
    let norm = if cos >= 0.0 { meta.max_row_norm } else { meta.min_row_norm };
    let allowance = (d as f64 + 16.0) * f64::EPSILON * meta.max_row_norm * h_norm;
    Some(norm * h_norm * cos + allowance)
}

fn spherical_single(meta: &ClusterMeta, mode: ClusterMode, h: &[f64], h_norm: f64, slack: f64) -> f64 {
    match (mode, cone_geometric(meta, h, h_norm)) {
        (ClusterMode::BiasAugmented, _) | (_, None) => euclidean_single(meta, mode, h, h_norm, slack),
        (_, Some(geo)) => geo + meta.max_bias + slack,
    }
}

/// Euclidean bounds for every cluster. `O(C d)`.
pub fn euclidean_bounds(index: &ClusterIndex, h: &[f64], h_norm: f64, slack: f64) -> Result<BoundVector> {
    check_dim(index, h)?;
    let values = index.clusters.iter().map(|m| euclidean_single(m, index.mode, h, h_norm, slack)).collect();
    Ok(BoundVector { values, mode: BoundMode::Euclidean, query_norm: h_norm, slack })
}

/// Cone bounds for every cluster; clusters with a zero centroid (and
/// bias-augmented indices) fall back to the Euclidean form.
pub fn spherical_bounds(index: &ClusterIndex, h: &[f64], h_norm: f64, slack: f64) -> Result<BoundVector> {
    check_dim(index, h)?;
    let values = index.clusters.iter().map(|m| spherical_single(m, index.mode, h, h_norm, slack)).collect();
    Ok(BoundVector { values, mode: BoundMode::Spherical, query_norm: h_norm, slack })
}

pub fn compute_bounds(index: &ClusterIndex, h: &[f64], h_norm: f64, mode: BoundMode, slack: f64) -> Result<BoundVector> {
    match mode {
        BoundMode::Euclidean => euclidean_bounds(index, h, h_norm, slack),
        BoundMode::Spherical => spherical_bounds(index, h, h_norm, slack),
    }
}

/// Bound for a single cluster; equal to the corresponding entry of
/// [`compute_bounds`].
pub fn cluster_bound(index: &ClusterIndex, cluster: usize, h: &[f64], h_norm: f64, mode: BoundMode, slack: f64) -> f64 {
    let meta = &index.clusters[cluster];
    match mode {
        BoundMode::Euclidean => euclidean_single(meta, index.mode, h, h_norm, slack),
        BoundMode::Spherical => spherical_single(meta, index.mode, h, h_norm, slack),
    }
}

/// The alternative angular expression
/// `|h| (|mu_c| cos(theta_c) + sin(theta_c)) + max_bias`. It ignores the angle between `h` and the centroid and is not
/// a certified bound; it exists for comparison only.
pub fn literal_angular_bounds(index: &ClusterIndex, h: &[f64], h_norm: f64) -> Result<Vec<f64>> {
    check_dim(index, h)?;
    Ok(index
        .clusters
        .iter()
        .map(|m| {
            let th = m.angular_radius;
            h_norm * (m.centroid_norm * th.cos() + th.sin()) + m.max_bias
        })
        .collect())
}

/// Euclidean bound for cluster `c` with the bias term restricted to members
/// outside `exclude`. Returns `-inf` once every member is excluded.
pub fn refined_bias_bound(
    index: &ClusterIndex,
    table: &EmbeddingTable,
    cluster: usize,
    h: &[f64],
    h_norm: f64,
    exclude: &HashSet<usize>,
) -> Result<f64> {
    check_dim(index, h)?;
    let meta = &index.clusters[cluster];
    let members = index.members(cluster);
    if members.iter().all(|t| exclude.contains(t)) {
        return Ok(f64::NEG_INFINITY);
    }
    if index.mode == ClusterMode::BiasAugmented {
        return Ok(euclidean_single(meta, index.mode, h, h_norm, 0.0));
    }
    let from_table = meta.bias_topm.iter().find(|e| !exclude.contains(&e.token)).map(|e| e.value);
    let best = match from_table {
        Some(b) => b,
        None => members
            .iter()
            .filter(|t| !exclude.contains(t))
            .map(|&t| table.bias(t))
            .fold(f64::NEG_INFINITY, f64::max),
    };
    Ok(euclidean_geometric(meta, index.mode, h, h_norm) + best)
}
