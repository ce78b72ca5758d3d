//! Offline vocabulary clustering: k-means (Euclidean, spherical, or over
//! bias-augmented rows), per-cluster geometry, and the token permutation that
//! makes every cluster a contiguous row range.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::tensor_io::{ByteReader, EmbeddingTable, FORMAT_VERSION};

pub const INDEX_MAGIC: [u8; 4] = *b"CSVI";
pub const DEFAULT_ITERS: usize = 32;
pub const DEFAULT_BIAS_DEPTH: usize = 3;

/// Cluster count scaled at 1.5% of the vocabulary.
pub fn default_cluster_count(vocab_size: usize) -> usize {
    ((vocab_size as f64 * 0.015).round() as usize).clamp(1, vocab_size.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMode {
    Euclidean,
    Spherical,
    BiasAugmented,
}

impl ClusterMode {
    fn tag(self) -> u8 {
        match self {
            ClusterMode::Euclidean => 0,
            ClusterMode::Spherical => 1,
            ClusterMode::BiasAugmented => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, FormatError> {
        match tag {
            0 => Ok(ClusterMode::Euclidean),
            1 => Ok(ClusterMode::Spherical),
            2 => Ok(ClusterMode::BiasAugmented),
            t => Err(FormatError::InvalidHeader(format!("unknown cluster mode {t}"))),
        }
    }

    /// Length of the centroid vectors for a table of hidden size `d`.
    pub fn geometry_dim(self, hidden_dim: usize) -> usize {
        match self {
            ClusterMode::BiasAugmented => hidden_dim + 1,
            _ => hidden_dim,
        }
    }
}

impl fmt::Display for ClusterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClusterMode::Euclidean => "euclidean",
            ClusterMode::Spherical => "spherical",
            ClusterMode::BiasAugmented => "bias_augmented",
        })
    }
}

impl std::str::FromStr for ClusterMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "euclidean" => Ok(ClusterMode::Euclidean),
            "spherical" => Ok(ClusterMode::Spherical),
            "bias_augmented" | "bias-augmented" => Ok(ClusterMode::BiasAugmented),
            other => Err(format!("unknown cluster mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasEntry {
    pub value: f64,
    pub token: usize,
}

/// Geometry and bias statistics of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMeta {
    /// Centroid in bound space (`d + 1` entries for bias-augmented indices).
    pub centroid: Vec<f64>,
    pub centroid_norm: f64,
    /// Max distance from the centroid to any member row (bound space).
    pub radius: f64,
    /// Max angle between a nonzero member row and the centroid direction.
    pub angular_radius: f64,
    pub max_row_norm: f64,
    pub min_row_norm: f64,
    pub max_bias: f64,
    /// Largest member biases, descending, ties by token id.
    pub bias_topm: Vec<BiasEntry>,
    /// Member range `[start, end)` in permuted order.
    pub start: usize,
    pub end: usize,
}

impl ClusterMeta {
    pub fn size(&self) -> usize {
        self.end - self.start
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildParams {
    pub clusters: usize,
    pub mode: ClusterMode,
    pub iters: usize,
    pub bias_depth: usize,
    pub seed: u64,
}

impl BuildParams {
    pub fn new(clusters: usize, mode: ClusterMode) -> Self {
        Self { clusters, mode, iters: DEFAULT_ITERS, bias_depth: DEFAULT_BIAS_DEPTH, seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_iters(mut self, iters: usize) -> Self {
        self.iters = iters;
        self
    }

    pub fn with_bias_depth(mut self, m: usize) -> Self {
        self.bias_depth = m;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterIndex {
    pub mode: ClusterMode,
    pub clusters: Vec<ClusterMeta>,
    /// `permutation[pos]` is the original token id stored at permuted position `pos`.
    pub permutation: Vec<usize>,
    /// `inverse[token]` is the permuted position of `token`.
    pub inverse: Vec<usize>,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub bias_depth: usize,
    pub fingerprint: [u8; 32],
}

impl ClusterIndex {
    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn members(&self, cluster: usize) -> &[usize] {
        &self.permutation[self.clusters[cluster].range()]
    }

    pub fn geometry_dim(&self) -> usize {
        self.mode.geometry_dim(self.hidden_dim)
    }

    pub fn mean_radius(&self) -> f64 {
        self.clusters.iter().map(|c| c.radius).sum::<f64>() / self.clusters.len() as f64
    }

    pub fn max_radius(&self) -> f64 {
        self.clusters.iter().map(|c| c.radius).fold(0.0, f64::max)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&INDEX_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.mode.tag());
        out.extend_from_slice(&(self.clusters.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.vocab_size as u64).to_le_bytes());
        out.extend_from_slice(&(self.hidden_dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.bias_depth as u16).to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        for c in &self.clusters {
            for x in &c.centroid {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for x in [c.centroid_norm, c.radius, c.angular_radius, c.max_bias] {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for slot in 0..self.bias_depth {
                let (value, token) = match c.bias_topm.get(slot) {
                    Some(e) => (e.value, e.token as u64),
                    None => (f64::NEG_INFINITY, u64::MAX),
                };
                out.extend_from_slice(&value.to_le_bytes());
                out.extend_from_slice(&token.to_le_bytes());
            }
            out.extend_from_slice(&(c.start as u64).to_le_bytes());
            out.extend_from_slice(&(c.end as u64).to_le_bytes());
            out.extend_from_slice(&c.max_row_norm.to_le_bytes());
            out.extend_from_slice(&c.min_row_norm.to_le_bytes());
        }
        for &p in &self.permutation {
            out.extend_from_slice(&(p as u64).to_le_bytes());
        }
        out
    }

    /// Parses an index file. Structural consistency is checked by
    /// [`validate_index`], not here, so tampered files still load.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(INDEX_MAGIC)?;
        r.version()?;
        let mode = ClusterMode::from_tag(r.u8()?)?;
        let c = r.u64()? as usize;
        let v = r.u64()? as usize;
        let d = r.u64()? as usize;
        let m = r.u16()? as usize;
        let fingerprint: [u8; 32] = r.take(32)?.try_into().unwrap();
        if c == 0 || c > v || d == 0 {
            return Err(FormatError::InvalidHeader(format!("C={c}, V={v}, d={d}")).into());
        }
        let gd = mode.geometry_dim(d);
        let mut clusters = Vec::with_capacity(c);
        for _ in 0..c {
            let centroid = (0..gd).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            let centroid_norm = r.f64()?;
            let radius = r.f64()?;
            let angular_radius = r.f64()?;
            let max_bias = r.f64()?;
            let mut bias_topm = Vec::with_capacity(m);
            for _ in 0..m {
                let value = r.f64()?;
                let token = r.u64()?;
                if token != u64::MAX {
                    bias_topm.push(BiasEntry { value, token: token as usize });
                }
            }
            let start = r.u64()? as usize;
            let end = r.u64()? as usize;
            let max_row_norm = r.f64()?;
            let min_row_norm = r.f64()?;
            clusters.push(ClusterMeta {
                centroid,
                centroid_norm,
                radius,
                angular_radius,
                max_row_norm,
                min_row_norm,
                max_bias,
                bias_topm,
                start,
                end,
            });
        }
        let permutation = (0..v).map(|_| r.u64().map(|p| p as usize)).collect::<Result<Vec<_>, _>>()?;
        r.finish()?;
        let mut inverse = vec![usize::MAX; v];
        for (pos, &tok) in permutation.iter().enumerate() {
            if tok < v {
                inverse[tok] = pos;
            }
        }
        Ok(Self { mode, clusters, permutation, inverse, vocab_size: v, hidden_dim: d, bias_depth: m, fingerprint })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Row of token `i` in the space the clustering operates on.
fn clustering_row(table: &EmbeddingTable, mode: ClusterMode, i: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend(table.row(i).iter().map(|&x| f64::from(x)));
    match mode {
        ClusterMode::Euclidean => {}
        ClusterMode::Spherical => {
            let n = norm(out);
            if n > 0.0 {
                out.iter_mut().for_each(|x| *x /= n);
            }
        }
        ClusterMode::BiasAugmented => out.push(table.bias(i)),
    }
}

/// Row of token `i` in the space the bounds are stated in (unit rows are only
/// used for assignment and the centroid in spherical mode).
fn bound_row(table: &EmbeddingTable, mode: ClusterMode, i: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend(table.row(i).iter().map(|&x| f64::from(x)));
    if mode == ClusterMode::BiasAugmented {
        out.push(table.bias(i));
    }
}

#[inline]
fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Angle between two nonzero vectors, accurate near 0 and pi.
pub(crate) fn angle_between(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    let mut diff = 0.0;
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

/// Nearest centroid by squared distance; ties go to the lower index.
fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let dist = sq_dist(point, c);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

fn assign(points: &[f64], centroids: &[f64], dim: usize) -> Vec<(usize, f64)> {
    points.par_chunks_exact(dim).map(|p| nearest(p, centroids, dim)).collect()
}

fn kmeans_pp(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = points[first * dim..(first + 1) * dim].to_vec();
    let mut d2: Vec<f64> =
        points.par_chunks_exact(dim).map(|p| sq_dist(p, &centroids[..dim])).collect();
    while centroids.len() / dim < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                if acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just past the final sum.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            chosen.iter().position(|&c| !c).unwrap_or(0)
        };
        chosen[pick] = true;
        let p = &points[pick * dim..(pick + 1) * dim];
        centroids.extend_from_slice(p);
        d2.par_iter_mut()
            .zip(points.par_chunks_exact(dim))
            .for_each(|(w, q)| *w = w.min(sq_dist(q, p)));
    }
    centroids
}

/// Moves the farthest point of a multi-member cluster into each empty cluster.
fn repair_empty(labels: &mut [usize], dists: &mut [f64], k: usize) -> bool {
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    let mut changed = false;
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let mut far: Option<usize> = None;
        for i in 0..labels.len() {
            if counts[labels[i]] > 1 && far.is_none_or(|f| dists[i] > dists[f]) {
                far = Some(i);
            }
        }
        let i = far.expect("k <= n guarantees a donor cluster");
        counts[labels[i]] -= 1;
        counts[j] = 1;
        labels[i] = j;
        dists[i] = 0.0;
        changed = true;
    }
    changed
}

fn update_centroids(points: &[f64], dim: usize, labels: &[usize], k: usize, spherical: bool) -> Vec<f64> {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.chunks_exact(dim).zip(labels) {
        counts[l] += 1;
        for (s, x) in sums[l * dim..(l + 1) * dim].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (j, c) in sums.chunks_exact_mut(dim).enumerate() {
        let n = counts[j].max(1) as f64;
        c.iter_mut().for_each(|x| *x /= n);
        if spherical {
            let len = norm(c);
            if len > 0.0 {
                c.iter_mut().for_each(|x| *x /= len);
            }
        }
    }
    sums
}

/// Lloyd's iterations with k-means++ seeding. Returns one label per point.
pub(crate) fn lloyd(points: &[f64], dim: usize, k: usize, iters: usize, spherical: bool, seed: u64) -> Vec<usize> {
    let n = points.len() / dim;
    if k == n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(points, dim, k, &mut rng);
    let (mut labels, mut dists): (Vec<usize>, Vec<f64>) = assign(points, &centroids, dim).into_iter().unzip();
    for _ in 0..iters {
        repair_empty(&mut labels, &mut dists, k);
        centroids = update_centroids(points, dim, &labels, k, spherical);
        let (next, next_d): (Vec<usize>, Vec<f64>) = assign(points, &centroids, dim).into_iter().unzip();
        dists = next_d;
        if next == labels {
            break;
        }
        labels = next;
    }
    repair_empty(&mut labels, &mut dists, k);
    labels
}

/// Clusters the rows of `table` and records per-cluster bound metadata.
pub fn build_index(table: &EmbeddingTable, params: &BuildParams) -> Result<ClusterIndex> {
    let v = table.vocab_size();
    let d = table.hidden_dim();
    let k = params.clusters;
    if k == 0 || k > v {
        return Err(Error::Config(format!("cluster count must be in [1, V={v}], got {k}")));
    }
    if params.iters == 0 {
        return Err(Error::Config("iteration cap must be at least 1".into()));
    }
    if params.bias_depth > u16::MAX as usize {
        return Err(Error::Config("bias table depth exceeds u16".into()));
    }
    let mode = params.mode;
    let gd = mode.geometry_dim(d);
    let mut points = Vec::with_capacity(v * gd);
    let mut row = Vec::with_capacity(gd);
    for i in 0..v {
        clustering_row(table, mode, i, &mut row);
        points.extend_from_slice(&row);
    }
    let labels = lloyd(&points, gd, k, params.iters, mode == ClusterMode::Spherical, params.seed);

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (tok, &l) in labels.iter().enumerate() {
        groups[l].push(tok);
    }
    // Largest clusters first; equal sizes ordered by their smallest token.
    groups.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));

    let mut permutation = Vec::with_capacity(v);
    let mut clusters = Vec::with_capacity(k);
    for members in &groups {
        let start = permutation.len();
        permutation.extend_from_slice(members);
        clusters.push(cluster_meta(table, mode, params.bias_depth, members, start));
    }
    let mut inverse = vec![0; v];
    for (pos, &tok) in permutation.iter().enumerate() {
        inverse[tok] = pos;
    }
    Ok(ClusterIndex {
        mode,
        clusters,
        permutation,
        inverse,
        vocab_size: v,
        hidden_dim: d,
        bias_depth: params.bias_depth,
        fingerprint: table.fingerprint(),
    })
}

/// Metadata for one member list (ascending token ids). Shared by the builder
/// and the validator so recomputation is bit-identical.
fn cluster_meta(
    table: &EmbeddingTable,
    mode: ClusterMode,
    bias_depth: usize,
    members: &[usize],
    start: usize,
) -> ClusterMeta {
    let d = table.hidden_dim();
    let gd = mode.geometry_dim(d);
    let mut row = Vec::with_capacity(gd);

    let mut centroid = vec![0.0; gd];
    for &tok in members {
        clustering_row(table, mode, tok, &mut row);
        for (c, x) in centroid.iter_mut().zip(&row) {
            *c += x;
        }
    }
    let n = members.len() as f64;
    centroid.iter_mut().for_each(|c| *c /= n);

    let direction = &centroid[..d];
    let direction_is_zero = direction.iter().all(|&x| x == 0.0);
    let mut radius: f64 = 0.0;
    let mut angular_radius: f64 = 0.0;
    let mut max_row_norm: f64 = 0.0;
    let mut min_row_norm = f64::INFINITY;
    for &tok in members {
        bound_row(table, mode, tok, &mut row);
        radius = radius.max(sq_dist(&row, &centroid).sqrt());
        let w = &row[..d];
        let wn = norm(w);
        max_row_norm = max_row_norm.max(wn);
        min_row_norm = min_row_norm.min(wn);
        if wn > 0.0 {
            let angle = if direction_is_zero { std::f64::consts::PI } else { angle_between(w, direction) };
            angular_radius = angular_radius.max(angle);
        }
    }

    let mut by_bias: Vec<BiasEntry> =
        members.iter().map(|&t| BiasEntry { value: table.bias(t), token: t }).collect();
    by_bias.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.token.cmp(&b.token)));
    let max_bias = by_bias[0].value;
    by_bias.truncate(bias_depth);

    ClusterMeta {
        centroid_norm: norm(&centroid),
        centroid,
        radius,
        angular_radius,
        max_row_norm,
        min_row_norm,
        max_bias,
        bias_topm: by_bias,
        start,
        end: start + members.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Radius,
    MaxBias,
    BiasTable,
    Angular,
    RowNorm,
    Partition,
    Permutation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub cluster: Option<usize>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.cluster {
            Some(c) => write!(f, "{:?} violation in cluster {c}: {}", self.kind, self.detail),
            None => write!(f, "{:?} violation: {}", self.kind, self.detail),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, kind: ViolationKind, cluster: Option<usize>, detail: String) {
        self.violations.push(Violation { kind, cluster, detail });
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

/// Recomputes every stored statistic by brute force and reports mismatches.
pub fn validate_index(index: &ClusterIndex, table: &EmbeddingTable) -> Result<ValidationReport> {
    if index.fingerprint != table.fingerprint() {
        return Err(Error::FingerprintMismatch);
    }
    let v = table.vocab_size();
    let mut report = ValidationReport::default();

    if index.vocab_size != v || index.hidden_dim != table.hidden_dim() || index.permutation.len() != v {
        report.push(ViolationKind::Partition, None, "index dimensions disagree with the table".into());
        return Ok(report);
    }

    let mut seen = vec![false; v];
    for (pos, &tok) in index.permutation.iter().enumerate() {
        if tok >= v || seen[tok] {
            report.push(ViolationKind::Permutation, None, format!("position {pos} holds invalid or repeated token {tok}"));
        } else {
            seen[tok] = true;
        }
    }
    if seen.iter().any(|s| !s) && report.violations.is_empty() {
        report.push(ViolationKind::Permutation, None, "permutation does not cover every token".into());
    }
    let permutation_ok = report.violations.is_empty();

    let mut ranges: Vec<(usize, usize, usize)> =
        index.clusters.iter().enumerate().map(|(c, m)| (m.start, m.end, c)).collect();
    ranges.sort_unstable();
    let mut cursor = 0;
    let mut ranges_ok = true;
    for &(start, end, c) in &ranges {
        if start != cursor || end <= start || end > v {
            report.push(ViolationKind::Partition, Some(c), format!("range [{start}, {end}) breaks the tiling at {cursor}"));
            ranges_ok = false;
        }
        cursor = end.max(cursor);
    }
    if cursor != v && ranges_ok {
        report.push(ViolationKind::Partition, None, format!("ranges cover [0, {cursor}) instead of [0, {v})"));
        ranges_ok = false;
    }
    if !(permutation_ok && ranges_ok) {
        return Ok(report);
    }

    for (c, meta) in index.clusters.iter().enumerate() {
        let members = &index.permutation[meta.range()];
        if members.windows(2).any(|w| w[0] >= w[1]) {
            report.push(ViolationKind::Partition, Some(c), "members are not in ascending token order".into());
        }
        let mut sorted = members.to_vec();
        sorted.sort_unstable();
        let fresh = cluster_meta(table, index.mode, index.bias_depth, &sorted, meta.start);
        if fresh.centroid != meta.centroid || fresh.centroid_norm != meta.centroid_norm {
            report.push(ViolationKind::Partition, Some(c), "stored centroid is not the mean of the recorded members".into());
        }
        if fresh.radius != meta.radius {
            report.push(ViolationKind::Radius, Some(c), format!("stored radius {} but members reach {}", meta.radius, fresh.radius));
        }
        if fresh.max_bias != meta.max_bias {
            report.push(ViolationKind::MaxBias, Some(c), format!("stored max bias {} but members reach {}", meta.max_bias, fresh.max_bias));
        }
        if fresh.bias_topm != meta.bias_topm {
            report.push(ViolationKind::BiasTable, Some(c), "top-m bias table does not match members".into());
        }
        if fresh.angular_radius != meta.angular_radius {
            report.push(
                ViolationKind::Angular,
                Some(c),
                format!("stored angular radius {} but members reach {}", meta.angular_radius, fresh.angular_radius),
            );
        }
        if fresh.max_row_norm != meta.max_row_norm || fresh.min_row_norm != meta.min_row_norm {
            report.push(ViolationKind::RowNorm, Some(c), "row norm extremes do not match members".into());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::synth_vocab;
    use proptest::prelude::*;

    fn four_points() -> EmbeddingTable {
        EmbeddingTable::new(4, 2, vec![0.0, 0.0, 0.1, 0.0, 10.0, 0.0, 10.1, 0.0], vec![0.0; 4]).unwrap()
    }

    #[test]
    fn two_separated_pairs() {
        let t = four_points();
        let idx = build_index(&t, &BuildParams::new(2, ClusterMode::Euclidean).with_seed(5)).unwrap();
        let mut got: Vec<(f64, f64)> = idx.clusters.iter().map(|c| (c.centroid[0], c.radius)).collect();
        got.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!((got[0].0 - 0.05).abs() < 1e-6 && (got[1].0 - 10.05).abs() < 1e-6);
        assert!((got[0].1 - 0.05).abs() < 1e-6 && (got[1].1 - 0.05).abs() < 1e-6);
        assert!(idx.clusters.iter().all(|c| c.centroid[1] == 0.0));
    }

    #[test]
    fn singleton_clusters() {
        let t = synth_vocab(30, 4, 3, 0.2, 2).unwrap();
        let idx = build_index(&t, &BuildParams::new(30, ClusterMode::Euclidean)).unwrap();
        assert!(idx.clusters.iter().all(|c| c.radius == 0.0 && c.size() == 1));
        assert!(validate_index(&idx, &t).unwrap().is_clean());
    }

    #[test]
    fn rejects_bad_cluster_counts() {
        let t = four_points();
        assert!(build_index(&t, &BuildParams::new(5, ClusterMode::Euclidean)).is_err());
        assert!(build_index(&t, &BuildParams::new(0, ClusterMode::Euclidean)).is_err());
        assert!(build_index(&t, &BuildParams::new(2, ClusterMode::Euclidean).with_iters(0)).is_err());
    }

    #[test]
    fn duplicate_points_never_leave_empty_clusters() {
        let t = EmbeddingTable::new(6, 2, vec![1.0; 12], vec![0.0; 6]).unwrap();
        let idx = build_index(&t, &BuildParams::new(4, ClusterMode::Euclidean)).unwrap();
        assert_eq!(idx.num_clusters(), 4);
        assert!(idx.clusters.iter().all(|c| c.size() >= 1));
        assert!(validate_index(&idx, &t).unwrap().is_clean());
    }

    #[test]
    fn radii_match_brute_force() {
        let t = synth_vocab(500, 16, 10, 0.05, 3).unwrap();
        let idx = build_index(&t, &BuildParams::new(10, ClusterMode::Euclidean)).unwrap();
        for c in &idx.clusters {
            let brute = idx.permutation[c.range()]
                .iter()
                .map(|&i| {
                    t.row(i)
                        .iter()
                        .zip(&c.centroid)
                        .map(|(&w, m)| (f64::from(w) - m).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(0.0, f64::max);
            assert_eq!(brute, c.radius);
        }
        assert!(idx.mean_radius() < 0.35, "mean radius {}", idx.mean_radius());
    }

    #[test]
    fn clusters_are_ordered_and_contiguous() {
        let t = synth_vocab(400, 8, 6, 0.2, 9).unwrap();
        let idx = build_index(&t, &BuildParams::new(12, ClusterMode::Euclidean)).unwrap();
        assert!(idx.clusters.windows(2).all(|w| w[0].size() >= w[1].size()));
        let mut cursor = 0;
        for c in &idx.clusters {
            assert_eq!(c.start, cursor);
            cursor = c.end;
            assert!(idx.permutation[c.range()].windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(cursor, 400);
    }

    #[test]
    fn spherical_and_augmented_modes_validate() {
        let t = synth_vocab(300, 8, 5, 0.3, 4).unwrap();
        for mode in [ClusterMode::Spherical, ClusterMode::BiasAugmented] {
            let idx = build_index(&t, &BuildParams::new(9, mode)).unwrap();
            assert_eq!(idx.clusters[0].centroid.len(), mode.geometry_dim(8));
            assert!(validate_index(&idx, &t).unwrap().is_clean(), "{mode}");
            for c in &idx.clusters {
                assert!((0.0..=std::f64::consts::PI).contains(&c.angular_radius));
            }
        }
    }

    #[test]
    fn bias_table_is_descending_and_headed_by_max() {
        let t = synth_vocab(200, 4, 4, 0.3, 12).unwrap();
        let idx = build_index(&t, &BuildParams::new(6, ClusterMode::Euclidean)).unwrap();
        for c in &idx.clusters {
            assert_eq!(c.bias_topm[0].value, c.max_bias);
            assert!(c.bias_topm.len() == c.size().min(3));
            assert!(c.bias_topm.windows(2).all(|w| w[0].value >= w[1].value));
        }
    }

    #[test]
    fn injected_radius_fault_is_reported_once() {
        let t = synth_vocab(300, 8, 5, 0.1, 1).unwrap();
        let mut idx = build_index(&t, &BuildParams::new(8, ClusterMode::Euclidean)).unwrap();
        idx.clusters[3].radius -= 1e-3;
        let report = validate_index(&idx, &t).unwrap();
        assert_eq!(report.violations.len(), 1, "{:?}", report.violations);
        assert_eq!(report.violations[0].kind, ViolationKind::Radius);
        assert_eq!(report.violations[0].cluster, Some(3));
    }

    #[test]
    fn swapped_permutation_entries_break_partition() {
        let t = synth_vocab(300, 8, 5, 0.1, 1).unwrap();
        let mut idx = build_index(&t, &BuildParams::new(8, ClusterMode::Euclidean)).unwrap();
        let (a, b) = (idx.clusters[0].start, idx.clusters[1].start);
        idx.permutation.swap(a, b);
        let report = validate_index(&idx, &t).unwrap();
        assert!(report.count(ViolationKind::Partition) >= 1, "{:?}", report.violations);
    }

    #[test]
    fn fingerprint_mismatch_is_an_error() {
        let t = synth_vocab(50, 4, 2, 0.1, 1).unwrap();
        let other = synth_vocab(50, 4, 2, 0.1, 2).unwrap();
        let idx = build_index(&t, &BuildParams::new(4, ClusterMode::Euclidean)).unwrap();
        assert!(matches!(validate_index(&idx, &other), Err(Error::FingerprintMismatch)));
    }

    #[test]
    fn index_file_roundtrip() {
        let t = synth_vocab(120, 6, 4, 0.2, 3).unwrap();
        for mode in [ClusterMode::Euclidean, ClusterMode::Spherical, ClusterMode::BiasAugmented] {
            let idx = build_index(&t, &BuildParams::new(7, mode).with_bias_depth(5)).unwrap();
            let bytes = idx.to_bytes();
            assert_eq!(&bytes[0..4], b"CSVI");
            let back = ClusterIndex::from_bytes(&bytes).unwrap();
            assert_eq!(back, idx);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn default_cluster_count_scales() {
        assert_eq!(default_cluster_count(5000), 75);
        assert_eq!(default_cluster_count(10), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn build_is_deterministic_and_permutation_inverts(seed in 0u64..1000, c in 1usize..20) {
            let t = synth_vocab(60, 5, 3, 0.4, seed).unwrap();
            let p = BuildParams::new(c, ClusterMode::Euclidean).with_seed(seed);
            let a = build_index(&t, &p).unwrap();
            let b = build_index(&t, &p).unwrap();
            prop_assert_eq!(a.to_bytes(), b.to_bytes());
            for tok in 0..60 {
                prop_assert_eq!(a.permutation[a.inverse[tok]], tok);
            }
            for c in &a.clusters {
                for &tok in &a.permutation[c.range()] {
                    let row: Vec<f64> = t.row(tok).iter().map(|&x| f64::from(x)).collect();
                    prop_assert!(sq_dist(&row, &c.centroid).sqrt() <= c.radius);
                }
            }
        }
    }
}
