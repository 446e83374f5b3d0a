//! Greedy sparse coding: a reference orthogonal matching pursuit and the
//! Gram-based Batch-OMP with a progressively extended Cholesky factor.

use rayon::prelude::*;

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::linalg::{argmax_by, axpy, dot, norm, spd_solve};
use crate::tensor::SignalMatrix;

/// Pursuit stops once the residual (or every remaining correlation) drops
/// below this.
pub const RESIDUAL_TOL: f64 = 1e-12;

/// Squared Cholesky pivots at or below this mark an atom as linearly
/// dependent on the current support.
pub const PIVOT_TOL: f64 = 1e-12;

/// Support (in selection order) and aligned coefficients of one column.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseColumn {
    pub support: Vec<usize>,
    pub coeffs: Vec<f64>,
}

impl SparseColumn {
    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }
}

/// Sparse codes for a batch of columns over a `K`-atom dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    k: usize,
    columns: Vec<SparseColumn>,
}

impl SparseCode {
    pub fn new(k: usize, columns: Vec<SparseColumn>) -> Result<Self> {
        for (j, col) in columns.iter().enumerate() {
            if col.support.len() != col.coeffs.len() {
                return Err(Error::DimensionMismatch(format!(
                    "column {j}: {} indices but {} coefficients",
                    col.support.len(),
                    col.coeffs.len()
                )));
            }
            for (p, &a) in col.support.iter().enumerate() {
                if a >= k {
                    return Err(Error::InvalidParameter(format!("column {j}: atom {a} out of range for K={k}")));
                }
                if col.support[..p].contains(&a) {
                    return Err(Error::InvalidParameter(format!("column {j}: atom {a} selected twice")));
                }
            }
            if col.coeffs.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidParameter(format!("column {j}: non-finite coefficient")));
            }
        }
        Ok(Self { k, columns })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn columns(&self) -> &[SparseColumn] {
        &self.columns
    }

    pub fn max_support(&self) -> usize {
        self.columns.iter().map(SparseColumn::len).max().unwrap_or(0)
    }

    /// Number of times each atom is selected, one count per (column, atom).
    pub fn usage_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.k];
        for col in &self.columns {
            for &a in &col.support {
                counts[a] += 1;
            }
        }
        counts
    }

    /// Dense `n x K` coefficient matrix, row `j` holding column `j`'s code.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.columns.len() * self.k];
        for (j, col) in self.columns.iter().enumerate() {
            for (&a, &c) in col.support.iter().zip(&col.coeffs) {
                dense[j * self.k + a] = c;
            }
        }
        dense
    }
}

/// Lower-triangular Cholesky factor of the support Gram matrix, grown one
/// row per pursuit iteration. Rows are stored packed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CholeskyFactor {
    n: usize,
    rows: Vec<f64>,
}

impl CholeskyFactor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.rows[i * (i + 1) / 2 + j]
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                out[i * n + j] = self.get(i, j);
            }
        }
        out
    }

    /// Solves `L w = b`.
    pub fn forward_solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut w = vec![0.0; self.n];
        for i in 0..self.n {
            let row = &self.rows[i * (i + 1) / 2..][..=i];
            let s = b[i] - dot(&row[..i], &w[..i]);
            w[i] = s / row[i];
        }
        w
    }

    /// Solves `L L^T x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = self.forward_solve(b);
        for i in (0..self.n).rev() {
            let mut s = x[i];
            for p in i + 1..self.n {
                s -= self.get(p, i) * x[p];
            }
            x[i] = s / self.get(i, i);
        }
        x
    }

    /// Returns the new row `[w^T, sqrt(diag - w^T w)]` with `L w = g_col`,
    /// without modifying the factor.
    pub fn next_row(&self, g_col: &[f64], diag: f64) -> Result<Vec<f64>> {
        if g_col.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "Gram column has length {}, factor has {} rows",
                g_col.len(),
                self.n
            )));
        }
        let mut w = self.forward_solve(g_col);
        let pivot = diag - dot(&w, &w);
        if !(pivot > PIVOT_TOL) {
            return Err(Error::NearDependence { pivot });
        }
        w.push(pivot.sqrt());
        Ok(w)
    }

    /// Appends a row computed by [`next_row`](Self::next_row).
    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.n + 1);
        self.rows.extend_from_slice(row);
        self.n += 1;
    }

    pub fn extend(&mut self, g_col: &[f64], diag: f64) -> Result<()> {
        let row = self.next_row(g_col, diag)?;
        self.push_row(&row);
        Ok(())
    }
}

/// Returns `f` grown by one row so that `L L^T` covers the new atom with
/// Gram column `g_col` (against the current support) and diagonal `diag`.
pub fn extend_cholesky(f: &CholeskyFactor, g_col: &[f64], diag: f64) -> Result<CholeskyFactor> {
    let mut out = f.clone();
    out.extend(g_col, diag)?;
    Ok(out)
}

/// Gram matrix `D D^T` (atoms as rows) and the initial correlations
/// `alpha0 = D^T y` for every column of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GramState {
    k: usize,
    gram: Vec<f64>,
    alpha0: Vec<f64>,
    sq_norms: Vec<f64>,
}

impl GramState {
    pub fn new(d: &Dictionary, y: &SignalMatrix) -> Result<Self> {
        if y.dim() != d.l() {
            return Err(Error::DimensionMismatch(format!("signal dim {} != dictionary dim {}", y.dim(), d.l())));
        }
        let k = d.k();
        let mut gram = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..=i {
                let v = dot(d.atom(i), d.atom(j));
                gram[i * k + j] = v;
                gram[j * k + i] = v;
            }
        }
        let alpha0: Vec<f64> = y.columns().flat_map(|c| d.correlate(c)).collect();
        let sq_norms = y.columns().map(|c| dot(c, c)).collect();
        Ok(Self { k, gram, alpha0, sq_norms })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn gram(&self) -> &[f64] {
        &self.gram
    }

    #[inline]
    pub fn g(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.k + j]
    }

    pub fn alpha0(&self, col: usize) -> &[f64] {
        &self.alpha0[col * self.k..(col + 1) * self.k]
    }

    pub fn columns(&self) -> usize {
        self.sq_norms.len()
    }
}

/// Result of the reference pursuit on one signal.
#[derive(Debug, Clone, PartialEq)]
pub struct OmpResult {
    pub support: Vec<usize>,
    pub coeffs: Vec<f64>,
    pub residual_norm: f64,
    /// Residual norm after each iteration.
    pub residual_history: Vec<f64>,
}

fn check_sparsity(s: usize, k: usize, dim: usize) -> Result<()> {
    if s == 0 || s > k.min(dim) {
        return Err(Error::InvalidParameter(format!(
            "sparsity {s} must lie in 1..=min(K={k}, dim={dim})"
        )));
    }
    Ok(())
}

/// Textbook OMP: explicit residual, correlation scan, and a from-scratch
/// least-squares solve on the full support at every iteration.
pub fn naive_omp(y: &[f64], d: &Dictionary, s: usize) -> Result<OmpResult> {
    if y.len() != d.l() {
        return Err(Error::DimensionMismatch(format!("signal dim {} != dictionary dim {}", y.len(), d.l())));
    }
    check_sparsity(s, d.k(), d.l())?;
    let mut support: Vec<usize> = Vec::with_capacity(s);
    let mut coeffs: Vec<f64> = Vec::new();
    let mut residual = y.to_vec();
    let mut history = Vec::with_capacity(s);
    let mut selected = vec![false; d.k()];
    for _ in 0..s {
        if norm(&residual) < RESIDUAL_TOL {
            break;
        }
        let Some((j, best)) = argmax_by((0..d.k()).filter(|&j| !selected[j]), |j| dot(d.atom(j), &residual).abs())
        else {
            break;
        };
        if best < RESIDUAL_TOL {
            break;
        }
        selected[j] = true;
        support.push(j);
        let n = support.len();
        let mut gram = vec![0.0; n * n];
        let mut rhs = vec![0.0; n];
        for (p, &a) in support.iter().enumerate() {
            rhs[p] = dot(d.atom(a), y);
            for (q, &b) in support.iter().enumerate() {
                gram[p * n + q] = dot(d.atom(a), d.atom(b));
            }
        }
        coeffs = spd_solve(&gram, &rhs, n, PIVOT_TOL).map_err(|pivot| Error::SingularSupport { pivot })?;
        residual.copy_from_slice(y);
        for (&a, &c) in support.iter().zip(&coeffs) {
            axpy(-c, d.atom(a), &mut residual);
        }
        history.push(norm(&residual));
    }
    Ok(OmpResult { support, coeffs, residual_norm: norm(&residual), residual_history: history })
}

/// Batch-OMP on one column of a prepared [`GramState`]. `observe` is called
/// with the support and factor after every extension.
pub fn batch_omp_column<F>(state: &GramState, col: usize, s: usize, mut observe: F) -> SparseColumn
where
    F: FnMut(&[usize], &CholeskyFactor),
{
    let k = state.k;
    let alpha0 = state.alpha0(col);
    let y_sq = state.sq_norms[col];
    let mut alpha = alpha0.to_vec();
    let mut factor = CholeskyFactor::new();
    let mut support: Vec<usize> = Vec::with_capacity(s);
    let mut gamma: Vec<f64> = Vec::new();
    // 0 = free, 1 = selected, 2 = excluded as dependent
    let mut status = vec![0u8; k];
    let mut g_col = Vec::with_capacity(s);

    while support.len() < s {
        let explained: f64 = support.iter().zip(&gamma).map(|(&a, c)| c * alpha0[a]).sum();
        let residual_sq = y_sq - explained;
        if residual_sq < RESIDUAL_TOL * RESIDUAL_TOL {
            break;
        }
        let mut extended = false;
        loop {
            let Some((j, best)) = argmax_by((0..k).filter(|&j| status[j] == 0), |j| alpha[j].abs()) else {
                break;
            };
            if best < RESIDUAL_TOL {
                break;
            }
            g_col.clear();
            g_col.extend(support.iter().map(|&a| state.g(a, j)));
            match factor.next_row(&g_col, state.g(j, j)) {
                Ok(row) => {
                    factor.push_row(&row);
                    status[j] = 1;
                    support.push(j);
                    extended = true;
                    break;
                }
                Err(_) => status[j] = 2,
            }
        }
        if !extended {
            if support.len() < s && status.iter().any(|&v| v == 2) {
                log::warn!(
                    "batch-omp: column {col} truncated at {} atoms (remaining atoms dependent)",
                    support.len()
                );
            }
            break;
        }
        observe(&support, &factor);
        let rhs: Vec<f64> = support.iter().map(|&a| alpha0[a]).collect();
        gamma = factor.solve(&rhs);
        // alpha = alpha0 - G_{:, tau} gamma
        alpha.copy_from_slice(alpha0);
        for (&a, &c) in support.iter().zip(&gamma) {
            axpy(-c, &state.gram[a * k..(a + 1) * k], &mut alpha);
        }
    }
    SparseColumn { support, coeffs: gamma }
}

/// Codes every column of `y` with at most `s` atoms of `d`. Columns are coded
/// in parallel; each column's arithmetic is independent of the schedule.
pub fn batch_omp(y: &SignalMatrix, d: &Dictionary, s: usize) -> Result<SparseCode> {
    check_sparsity(s, d.k(), d.l())?;
    let state = GramState::new(d, y)?;
    let columns: Vec<SparseColumn> =
        (0..y.count()).into_par_iter().map(|c| batch_omp_column(&state, c, s, |_, _| {})).collect();
    Ok(SparseCode { k: d.k(), columns })
}

/// `gamma D`: each output column is the coefficient-weighted sum of its atoms.
pub fn reconstruct(code: &SparseCode, d: &Dictionary) -> Result<SignalMatrix> {
    if code.k != d.k() {
        return Err(Error::DimensionMismatch(format!("code K {} != dictionary K {}", code.k, d.k())));
    }
    if code.columns.is_empty() {
        return Err(Error::DimensionMismatch("cannot reconstruct an empty code".into()));
    }
    let mut out = SignalMatrix::zeros(d.l(), code.columns.len());
    for (j, col) in code.columns.iter().enumerate() {
        let dst = out.col_mut(j);
        for (&a, &c) in col.support.iter().zip(&col.coeffs) {
            axpy(c, d.atom(a), dst);
        }
    }
    Ok(out)
}
