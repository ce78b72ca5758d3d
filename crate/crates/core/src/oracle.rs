//! Dense reference computations. Deliberately plain: one pass over every
//! row, no blocking, nothing shared with the pruned path except the
//! per-row summation order.

use crate::error::{Error, Result};
use crate::tensor_io::EmbeddingTable;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseResult {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// `log Z` over the whole vocabulary.
    pub log_z: f64,
    /// Every token id by (logit desc, id asc).
    pub ranking: Vec<usize>,
}

impl DenseResult {
    pub fn vocab_size(&self) -> usize {
        self.logits.len()
    }

    /// The k best ids in ranking order.
    pub fn topk(&self, k: usize) -> &[usize] {
        &self.ranking[..k.min(self.ranking.len())]
    }

    pub fn argmax(&self) -> usize {
        self.ranking[0]
    }
}

/// `<W_i, h> + b_i`, accumulating `f64(w_ij) * h_j` in increasing `j`.
pub fn row_logit(row: &[f32], bias: f32, h: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for (w, x) in row.iter().zip(h) {
        acc += f64::from(*w) * x;
    }
    acc + f64::from(bias)
}

pub fn dense_logits(table: &EmbeddingTable, h: &[f64]) -> Result<DenseResult> {
    if h.len() != table.hidden_dim() {
        return Err(Error::DimensionMismatch { expected: table.hidden_dim(), actual: h.len() });
    }
    let v = table.vocab_size();
    let logits: Vec<f64> = (0..v).map(|i| row_logit(table.row(i), table.biases()[i], h)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = shifted.iter().sum();
    let probs = shifted.iter().map(|e| e / total).collect();
    let mut ranking: Vec<usize> = (0..v).collect();
    ranking.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    Ok(DenseResult { logits, probs, log_z: max + total.ln(), ranking })
}

/// Total variation between the true softmax and its renormalized
/// restriction to a sub-vocabulary, computed two independent ways.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvReport {
    /// `1/2 sum_i |p_i - p~_i|`.
    pub direct: f64,
    /// `R / (Z_S + R)` with `R` the mass of the excluded logits.
    pub closed_form: f64,
}

fn membership(v: usize, sub: &[usize]) -> Result<Vec<bool>> {
    if sub.is_empty() {
        return Err(Error::Config("empty sub-vocabulary".into()));
    }
    let mut inside = vec![false; v];
    for &t in sub {
        if t >= v {
            return Err(Error::Config(format!("token {t} outside vocabulary of {v}")));
        }
        inside[t] = true;
    }
    Ok(inside)
}

pub fn tv_distance(full: &DenseResult, sub: &[usize]) -> Result<TvReport> {
    let inside = membership(full.vocab_size(), sub)?;
    let max_in = full
        .logits
        .iter()
        .zip(&inside)
        .filter(|(_, &s)| s)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let z_s_scaled: f64 = full.logits.iter().zip(&inside).filter(|(_, &s)| s).map(|(l, _)| (l - max_in).exp()).sum();
    let log_z_s = max_in + z_s_scaled.ln();

    let mut direct = 0.0;
    for (i, &l) in full.logits.iter().enumerate() {
        let q = if inside[i] { (l - log_z_s).exp() } else { 0.0 };
        direct += (full.probs[i] - q).abs();
    }
    direct *= 0.5;

    let outside: Vec<f64> = full.logits.iter().zip(&inside).filter(|(_, &s)| !s).map(|(l, _)| *l).collect();
    let closed_form = if outside.is_empty() {
        0.0
    } else {
        let max_out = outside.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_r = max_out + outside.iter().map(|l| (l - max_out).exp()).sum::<f64>().ln();
        1.0 / (1.0 + (log_z_s - log_r).exp())
    };
    Ok(TvReport { direct, closed_form })
}

/// True probability mass outside the sub-vocabulary.
pub fn external_mass(full: &DenseResult, sub: &[usize]) -> Result<f64> {
    let inside = membership(full.vocab_size(), sub)?;
    Ok(full.probs.iter().zip(&inside).filter(|(_, &s)| !s).map(|(p, _)| p).sum())
}
