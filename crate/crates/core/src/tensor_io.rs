//! Embedding tables, hidden-state batches and their little-endian file formats.
//!
//! Weights are kept as `f32` exactly as they appear on disk; every consumer
//! promotes to `f64` before doing bound or certification arithmetic.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};

pub const TABLE_MAGIC: [u8; 4] = *b"CSVD";
pub const QUERY_MAGIC: [u8; 4] = *b"CSVH";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const TABLE_HEADER_LEN: usize = 32;

/// Output-layer weights `W` (row-major `V x d`) and bias `b`.
#[derive(Debug)]
pub struct EmbeddingTable {
    vocab_size: usize,
    hidden_dim: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
    fingerprint: OnceLock<[u8; 32]>,
}

impl Clone for EmbeddingTable {
    fn clone(&self) -> Self {
        Self {
            vocab_size: self.vocab_size,
            hidden_dim: self.hidden_dim,
            weights: self.weights.clone(),
            bias: self.bias.clone(),
            fingerprint: self.fingerprint.clone(),
        }
    }
}

impl PartialEq for EmbeddingTable {
    fn eq(&self, other: &Self) -> bool {
        self.vocab_size == other.vocab_size
            && self.hidden_dim == other.hidden_dim
            && self.weights == other.weights
            && self.bias == other.bias
    }
}

impl EmbeddingTable {
    pub fn new(vocab_size: usize, hidden_dim: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if vocab_size == 0 || hidden_dim == 0 {
            return Err(Error::Config(format!(
                "table dimensions must be positive (V={vocab_size}, d={hidden_dim})"
            )));
        }
        let expected = vocab_size
            .checked_mul(hidden_dim)
            .ok_or_else(|| Error::Config("V*d overflows".into()))?;
        if weights.len() != expected {
            return Err(Error::DimensionMismatch { expected, actual: weights.len() });
        }
        if bias.len() != vocab_size {
            return Err(Error::DimensionMismatch { expected: vocab_size, actual: bias.len() });
        }
        if let Some(index) = weights.iter().position(|w| !w.is_finite()) {
            return Err(FormatError::NonFinite { field: "weights", index }.into());
        }
        if let Some(index) = bias.iter().position(|b| !b.is_finite()) {
            return Err(FormatError::NonFinite { field: "bias", index }.into());
        }
        Ok(Self { vocab_size, hidden_dim, weights, bias, fingerprint: OnceLock::new() })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn biases(&self) -> &[f32] {
        &self.bias
    }

    #[inline]
    pub fn row(&self, token: usize) -> &[f32] {
        let d = self.hidden_dim;
        &self.weights[token * d..(token + 1) * d]
    }

    #[inline]
    pub fn bias(&self, token: usize) -> f64 {
        f64::from(self.bias[token])
    }

    /// Copy of the table with every nonzero row scaled to unit L2 norm.
    pub fn unit_normalized(&self) -> Self {
        let d = self.hidden_dim;
        let mut weights = self.weights.clone();
        for row in weights.chunks_exact_mut(d) {
            let norm = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            if norm > 0.0 {
                for x in row.iter_mut() {
                    *x = (f64::from(*x) / norm) as f32;
                }
            }
        }
        Self {
            vocab_size: self.vocab_size,
            hidden_dim: d,
            weights,
            bias: self.bias.clone(),
            fingerprint: OnceLock::new(),
        }
    }

    /// Copy of the table with the bias vector replaced.
    pub fn with_bias(&self, bias: Vec<f32>) -> Result<Self> {
        Self::new(self.vocab_size, self.hidden_dim, self.weights.clone(), bias)
    }

    /// SHA-256 of the canonical file encoding.
    pub fn fingerprint(&self) -> [u8; 32] {
        *self.fingerprint.get_or_init(|| Sha256::digest(self.to_bytes()).into())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(TABLE_HEADER_LEN + 4 * (self.weights.len() + self.bias.len()));
        out.extend_from_slice(&TABLE_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.vocab_size as u64).to_le_bytes());
        out.extend_from_slice(&(self.hidden_dim as u64).to_le_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&[0u8; 7]);
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for b in &self.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(TABLE_MAGIC)?;
        r.version()?;
        let v = r.u64()? as usize;
        let d = r.u64()? as usize;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(FormatError::UnsupportedDtype(dtype).into());
        }
        r.take(7)?;
        if v == 0 || d == 0 {
            return Err(FormatError::InvalidHeader(format!("V={v}, d={d}")).into());
        }
        let n = v
            .checked_mul(d)
            .ok_or_else(|| FormatError::InvalidHeader("V*d overflows".into()))?;
        let weights = r.f32_vec(n, "weights")?;
        let bias = r.f32_vec(v, "bias")?;
        r.finish()?;
        Self::new(v, d, weights, bias)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn load_embedding_table(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    EmbeddingTable::load(path)
}

/// L2 norm accumulated left to right in `f64`.
#[inline]
pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// A batch of hidden states with their precomputed norms.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    hidden_dim: usize,
    data: Vec<f32>,
    norms: Vec<f64>,
}

impl QueryBatch {
    pub fn new(hidden_dim: usize, data: Vec<f32>) -> Result<Self> {
        if hidden_dim == 0 {
            return Err(Error::Config("hidden dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(hidden_dim) {
            return Err(Error::DimensionMismatch {
                expected: (data.len() / hidden_dim + 1) * hidden_dim,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(FormatError::NonFinite { field: "hidden", index }.into());
        }
        let norms = data
            .chunks_exact(hidden_dim)
            .map(|row| l2_norm(&row.iter().map(|&x| f64::from(x)).collect::<Vec<_>>()))
            .collect();
        Ok(Self { hidden_dim, data, norms })
    }

    /// Builds a batch from `f64` vectors; values are rounded to `f32`.
    pub fn from_vectors(hidden_dim: usize, vectors: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(vectors.len() * hidden_dim);
        for v in vectors {
            if v.len() != hidden_dim {
                return Err(Error::DimensionMismatch { expected: hidden_dim, actual: v.len() });
            }
            data.extend(v.iter().map(|&x| x as f32));
        }
        Self::new(hidden_dim, data)
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn query(&self, i: usize) -> Vec<f64> {
        let d = self.hidden_dim;
        self.data[i * d..(i + 1) * d].iter().map(|&x| f64::from(x)).collect()
    }

    pub fn norm(&self, i: usize) -> f64 {
        self.norms[i]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * self.data.len());
        out.extend_from_slice(&QUERY_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.hidden_dim as u64).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(QUERY_MAGIC)?;
        r.version()?;
        let count = r.u64()? as usize;
        let d = r.u64()? as usize;
        if d == 0 {
            return Err(FormatError::InvalidHeader("d=0".into()).into());
        }
        let n = count
            .checked_mul(d)
            .ok_or_else(|| FormatError::InvalidHeader("count*d overflows".into()))?;
        let data = r.f32_vec(n, "hidden")?;
        r.finish()?;
        Self::new(d, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// A synthetic table together with the mixture that generated it.
#[derive(Debug, Clone)]
pub struct SyntheticMixture {
    pub table: EmbeddingTable,
    /// Mode centers, `n_modes x d`, as stored (`f32`).
    pub centers: Vec<Vec<f32>>,
    /// Mode index of every row.
    pub modes: Vec<usize>,
}

/// Gaussian-mixture vocabulary: centers are `N(0, I/d)` (norm close to one),
/// rows are `center + spread * N(0, I/d)` so `spread` is the typical
/// deviation norm, and biases are uniform on `[-1, 1]`.
pub fn synth_mixture(
    vocab_size: usize,
    hidden_dim: usize,
    n_modes: usize,
    spread: f64,
    seed: u64,
) -> Result<SyntheticMixture> {
    if vocab_size == 0 || hidden_dim == 0 {
        return Err(Error::Config("V and d must be positive".into()));
    }
    if n_modes == 0 || n_modes > vocab_size {
        return Err(Error::Config(format!("n_modes must be in [1, V], got {n_modes}")));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Config(format!("spread must be a finite non-negative real, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (hidden_dim as f64).sqrt();
    let centers: Vec<Vec<f64>> = (0..n_modes)
        .map(|_| {
            (0..hidden_dim)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    f64::from((z * scale) as f32)
                })
                .collect()
        })
        .collect();
    let mut weights = Vec::with_capacity(vocab_size * hidden_dim);
    let mut modes = Vec::with_capacity(vocab_size);
    for _ in 0..vocab_size {
        let mode = rng.random_range(0..n_modes);
        modes.push(mode);
        for &c in &centers[mode] {
            let noise: f64 = rng.sample(StandardNormal);
            weights.push((c + spread * scale * noise) as f32);
        }
    }
    let bias: Vec<f32> = (0..vocab_size).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
    let table = EmbeddingTable::new(vocab_size, hidden_dim, weights, bias)?;
    let centers = centers.into_iter().map(|c| c.into_iter().map(|x| x as f32).collect()).collect();
    Ok(SyntheticMixture { table, centers, modes })
}

pub fn synth_vocab(
    vocab_size: usize,
    hidden_dim: usize,
    n_modes: usize,
    spread: f64,
    seed: u64,
) -> Result<EmbeddingTable> {
    synth_mixture(vocab_size, hidden_dim, n_modes, spread, seed).map(|m| m.table)
}

/// Bounds-checked little-endian reader shared by the artifact formats.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(FormatError::TruncatedPayload { needed: n, available });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn version(&mut self) -> Result<(), FormatError> {
        let found = self.u32()?;
        if found != FORMAT_VERSION {
            return Err(FormatError::VersionMismatch { expected: FORMAT_VERSION, found });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32_vec(&mut self, n: usize, field: &'static str) -> Result<Vec<f32>, FormatError> {
        let needed = n
            .checked_mul(4)
            .ok_or_else(|| FormatError::InvalidHeader("payload length overflows".into()))?;
        let raw = self.take(needed)?;
        let mut out = Vec::with_capacity(n);
        for (index, chunk) in raw.chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes(chunk.try_into().unwrap());
            if !x.is_finite() {
                return Err(FormatError::NonFinite { field, index });
            }
            out.push(x);
        }
        Ok(out)
    }

    pub(crate) fn finish(&self) -> Result<(), FormatError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}
