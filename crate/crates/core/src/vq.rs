//! Vector-quantization bottleneck: nearest-codeword assignment, one-hot
//! reconstruction, VQ loss terms and EMA codebook updates.

use rayon::prelude::*;

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::metrics::{mse, UsageHistogram};
use crate::sparse_coding::{SparseCode, SparseColumn};
use crate::tensor::SignalMatrix;

pub const DEFAULT_DECAY: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Codebook `E` plus the EMA statistics used to update it.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    embeddings: Dictionary,
    ema_counts: Vec<f64>,
    ema_sums: Vec<f64>,
    decay: f64,
    epsilon: f64,
}

impl Codebook {
    pub fn new(embeddings: Dictionary, decay: f64, epsilon: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidParameter(format!("EMA decay must lie in [0, 1), got {decay}")));
        }
        if !(epsilon >= 0.0) {
            return Err(Error::InvalidParameter(format!("EMA epsilon must be non-negative, got {epsilon}")));
        }
        let (k, l) = (embeddings.k(), embeddings.l());
        Ok(Self { embeddings, ema_counts: vec![0.0; k], ema_sums: vec![0.0; k * l], decay, epsilon })
    }

    /// Restores a codebook with saved EMA statistics.
    pub fn with_ema_state(
        embeddings: Dictionary,
        decay: f64,
        epsilon: f64,
        counts: Vec<f64>,
        sums: Vec<f64>,
    ) -> Result<Self> {
        let mut cb = Self::new(embeddings, decay, epsilon)?;
        if counts.len() != cb.k() || sums.len() != cb.k() * cb.l() {
            return Err(Error::DimensionMismatch("EMA state does not match codebook shape".into()));
        }
        if counts.iter().any(|&c| !(c >= 0.0)) {
            return Err(Error::InvalidParameter("EMA counts must be non-negative".into()));
        }
        cb.ema_counts = counts;
        cb.ema_sums = sums;
        Ok(cb)
    }

    pub fn k(&self) -> usize {
        self.embeddings.k()
    }

    pub fn l(&self) -> usize {
        self.embeddings.l()
    }

    pub fn embeddings(&self) -> &Dictionary {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut Dictionary {
        &mut self.embeddings
    }

    pub fn codeword(&self, k: usize) -> &[f64] {
        self.embeddings.atom(k)
    }

    pub fn ema_counts(&self) -> &[f64] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &[f64] {
        &self.ema_sums
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// Nearest-codeword index and squared distance for every column.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl Assignment {
    pub fn usage(&self, k: usize) -> UsageHistogram {
        let mut h = UsageHistogram::new(k);
        for &i in &self.indices {
            h.record(i);
        }
        h
    }

    /// The assignment as an `S = 1` sparse code with unit coefficients.
    pub fn to_sparse_code(&self, k: usize) -> Result<SparseCode> {
        SparseCode::new(
            k,
            self.indices.iter().map(|&i| SparseColumn { support: vec![i], coeffs: vec![1.0] }).collect(),
        )
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest codeword in squared l2 per column; ties go to the lowest index.
pub fn assign(z: &SignalMatrix, cb: &Codebook) -> Result<Assignment> {
    if z.dim() != cb.l() {
        return Err(Error::DimensionMismatch(format!("signal dim {} != codebook dim {}", z.dim(), cb.l())));
    }
    let (indices, distances): (Vec<usize>, Vec<f64>) = (0..z.count())
        .into_par_iter()
        .map(|j| {
            let col = z.col(j);
            let mut best = (0, squared_distance(col, cb.codeword(0)));
            for k in 1..cb.k() {
                let d = squared_distance(col, cb.codeword(k));
                if d < best.1 {
                    best = (k, d);
                }
            }
            best
        })
        .unzip();
    Ok(Assignment { indices, distances })
}

/// Column `j` becomes codeword `indices[j]`.
pub fn one_hot_reconstruct(a: &Assignment, cb: &Codebook) -> Result<SignalMatrix> {
    if a.indices.is_empty() {
        return Err(Error::DimensionMismatch("empty assignment".into()));
    }
    if let Some(&bad) = a.indices.iter().find(|&&i| i >= cb.k()) {
        return Err(Error::InvalidParameter(format!("codeword index {bad} out of range for K={}", cb.k())));
    }
    SignalMatrix::from_columns(cb.l(), a.indices.iter().map(|&i| cb.codeword(i)))
}

/// Codebook and commitment terms, both mean-reduced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqLosses {
    /// `mean ||sg[z] - zhat||^2`, routed to the codebook.
    pub codebook_term: f64,
    /// `mean ||z - sg[zhat]||^2`, routed to the encoder; the caller weights
    /// it by beta.
    pub commitment_term: f64,
}

/// Both terms share a forward value and differ only in where gradients go.
pub fn vq_losses(z: &SignalMatrix, zhat: &SignalMatrix) -> Result<VqLosses> {
    if z.dim() != zhat.dim() || z.count() != zhat.count() {
        return Err(Error::DimensionMismatch("vq_losses inputs differ in shape".into()));
    }
    let m = mse(z.data(), zhat.data())?;
    Ok(VqLosses { codebook_term: m, commitment_term: m })
}

/// EMA codebook update with Laplace-smoothed counts:
/// `N <- d N + (1 - d) n`, `m <- d m + (1 - d) sum z`,
/// `e = m / N~` with `N~_k = (N_k + eps) / (sum N + K eps) * sum N`.
/// Codewords whose count is still zero are left untouched.
pub fn ema_update(cb: &mut Codebook, z: &SignalMatrix, a: &Assignment) -> Result<()> {
    if z.dim() != cb.l() || a.indices.len() != z.count() {
        return Err(Error::DimensionMismatch("assignment, signals and codebook disagree".into()));
    }
    let (k, l) = (cb.k(), cb.l());
    let mut batch_counts = vec![0.0; k];
    let mut batch_sums = vec![0.0; k * l];
    for (j, &i) in a.indices.iter().enumerate() {
        if i >= k {
            return Err(Error::InvalidParameter(format!("codeword index {i} out of range for K={k}")));
        }
        batch_counts[i] += 1.0;
        for (s, v) in batch_sums[i * l..(i + 1) * l].iter_mut().zip(z.col(j)) {
            *s += v;
        }
    }
    let (decay, keep) = (cb.decay, 1.0 - cb.decay);
    for (n, b) in cb.ema_counts.iter_mut().zip(&batch_counts) {
        *n = decay * *n + keep * b;
    }
    for (m, b) in cb.ema_sums.iter_mut().zip(&batch_sums) {
        *m = decay * *m + keep * b;
    }
    let total: f64 = cb.ema_counts.iter().sum();
    let denom = total + k as f64 * cb.epsilon;
    for i in 0..k {
        let n = cb.ema_counts[i];
        if n <= 0.0 {
            continue;
        }
        let smoothed = (n + cb.epsilon) / denom * total;
        let sums = &cb.ema_sums[i * l..(i + 1) * l];
        for (e, m) in cb.embeddings.atom_mut(i).iter_mut().zip(sums) {
            *e = m / smoothed;
        }
    }
    Ok(())
}
