//! Dictionary container and the two dictionary update rules: the implicit
//! gradient update (Adam on the codebook loss) and the learning-rate-free
//! online block-coordinate descent.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};
use crate::optim::Adam;
use crate::sparse_coding::SparseCode;
use crate::tensor::SignalMatrix;

/// Atoms with a squared norm below this are treated as zero and never
/// normalized.
const ZERO_ATOM: f64 = 1e-24;

/// Diagonal accumulator entries below this mark an atom as unused by BCD.
pub const BCD_MIN_USAGE: f64 = 1e-10;

/// `K x L` matrix of atoms, stored row-major (atom `k` is row `k`).
///
/// The VQ codebook reuses this type, so unit norm is not enforced on
/// construction; the dictionary update rules renormalize after every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    k: usize,
    l: usize,
    atoms: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitStrategy {
    #[default]
    GaussianNormalized,
    DataSample,
}

impl Dictionary {
    pub fn from_atoms(k: usize, l: usize, atoms: Vec<f64>) -> Result<Self> {
        if k == 0 || l == 0 {
            return Err(Error::InvalidParameter(format!("dictionary dims must be positive, got {k}x{l}")));
        }
        if atoms.len() != k * l {
            return Err(Error::DimensionMismatch(format!("atom data length {} != {k}*{l}", atoms.len())));
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("dictionary contains non-finite entries".into()));
        }
        Ok(Self { k, l, atoms })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn atoms_mut(&mut self) -> &mut [f64] {
        &mut self.atoms
    }

    pub fn atom(&self, k: usize) -> &[f64] {
        &self.atoms[k * self.l..(k + 1) * self.l]
    }

    pub fn atom_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.atoms[k * self.l..(k + 1) * self.l]
    }

    /// Rescales every nonzero atom to unit l2 norm.
    pub fn normalize(&mut self) {
        for row in self.atoms.chunks_exact_mut(self.l) {
            normalize_in_place(row);
        }
    }

    pub fn is_unit_norm(&self, tol: f64) -> bool {
        self.atoms.chunks_exact(self.l).all(|a| (norm(a) - 1.0).abs() <= tol)
    }

    /// `D^T y`: correlation of `y` with every atom.
    pub fn correlate(&self, y: &[f64]) -> Vec<f64> {
        self.atoms.chunks_exact(self.l).map(|a| dot(a, y)).collect()
    }
}

fn normalize_in_place(v: &mut [f64]) -> bool {
    let sq = dot(v, v);
    if sq <= ZERO_ATOM {
        return false;
    }
    let inv = 1.0 / sq.sqrt();
    v.iter_mut().for_each(|x| *x *= inv);
    true
}

/// Builds a `k x l` dictionary. `DataSample` draws `k` distinct nonzero
/// columns of `data`; both strategies are deterministic for a fixed seed.
pub fn init_dictionary(
    k: usize,
    l: usize,
    strategy: InitStrategy,
    seed: u64,
    data: Option<&SignalMatrix>,
) -> Result<Dictionary> {
    if k == 0 || l == 0 {
        return Err(Error::InvalidParameter(format!("dictionary dims must be positive, got {k}x{l}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atoms = match strategy {
        InitStrategy::GaussianNormalized => {
            let mut atoms: Vec<f64> = (0..k * l).map(|_| StandardNormal.sample(&mut rng)).collect();
            for row in atoms.chunks_exact_mut(l) {
                normalize_in_place(row);
            }
            atoms
        }
        InitStrategy::DataSample => {
            let data = data.ok_or_else(|| Error::InvalidParameter("DataSample init requires data".into()))?;
            if data.dim() != l {
                return Err(Error::DimensionMismatch(format!(
                    "data dim {} != dictionary dim {l}",
                    data.dim()
                )));
            }
            if data.count() < k {
                return Err(Error::InsufficientData { needed: k, available: data.count() });
            }
            let mut order: Vec<usize> = (0..data.count()).collect();
            order.shuffle(&mut rng);
            let mut atoms = Vec::with_capacity(k * l);
            let mut taken = 0;
            for j in order {
                if taken == k {
                    break;
                }
                let mut col = data.col(j).to_vec();
                if normalize_in_place(&mut col) {
                    atoms.extend_from_slice(&col);
                    taken += 1;
                }
            }
            if taken < k {
                return Err(Error::InsufficientData { needed: k, available: taken });
            }
            atoms
        }
    };
    Dictionary::from_atoms(k, l, atoms)
}

/// Gradient of `sum_cols ||z_col - gamma_col D||^2` with respect to `D` at
/// fixed codes: `2 gamma^T (gamma D - Z)`, row-major `K x L`. Only atoms that
/// appear in some support receive a nonzero row.
pub fn dict_gradient(d: &Dictionary, z: &SignalMatrix, code: &SparseCode) -> Result<Vec<f64>> {
    check_code_dims(d, z, code)?;
    let l = d.l();
    let mut grad = vec![0.0; d.k() * l];
    let mut residual = vec![0.0; l];
    for (col, zc) in code.columns().iter().zip(z.columns()) {
        if col.support.is_empty() {
            continue;
        }
        residual.iter_mut().zip(zc).for_each(|(r, v)| *r = -v);
        for (&t, &c) in col.support.iter().zip(&col.coeffs) {
            axpy(c, d.atom(t), &mut residual);
        }
        for (&t, &c) in col.support.iter().zip(&col.coeffs) {
            axpy(2.0 * c, &residual, &mut grad[t * l..(t + 1) * l]);
        }
    }
    Ok(grad)
}

fn check_code_dims(d: &Dictionary, z: &SignalMatrix, code: &SparseCode) -> Result<()> {
    if code.k() != d.k() {
        return Err(Error::DimensionMismatch(format!("code K {} != dictionary K {}", code.k(), d.k())));
    }
    if z.dim() != d.l() {
        return Err(Error::DimensionMismatch(format!("signal dim {} != dictionary dim {}", z.dim(), d.l())));
    }
    if code.len() != z.count() {
        return Err(Error::DimensionMismatch(format!(
            "code has {} columns, signals have {}",
            code.len(),
            z.count()
        )));
    }
    Ok(())
}

/// One Adam step on the atoms followed by renormalization to unit norm.
pub fn apply_gradient_update(d: &mut Dictionary, grad: &[f64], optimizer: &mut Adam, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidParameter(format!("learning rate must be positive, got {lr}")));
    }
    if grad.len() != d.atoms.len() {
        return Err(Error::DimensionMismatch(format!(
            "gradient length {} != {}",
            grad.len(),
            d.atoms.len()
        )));
    }
    optimizer.step(&mut d.atoms, grad, lr);
    d.normalize();
    Ok(())
}

/// Forgetting factor `(theta + 1 - xi) / (theta + 1)` with
/// `theta = t xi` for `t < xi` and `xi^2 + t - xi` otherwise.
pub fn adaptive_beta(t: u64, xi: u64) -> f64 {
    assert!(t >= 1 && xi >= 1, "adaptive_beta needs t >= 1 and xi >= 1");
    let (t, xi) = (t as f64, xi as f64);
    let theta = if t < xi { t * xi } else { xi * xi + t - xi };
    (theta + 1.0 - xi) / (theta + 1.0)
}

/// Moving-average sufficient statistics for online dictionary learning.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineDlState {
    k: usize,
    l: usize,
    /// `K x K`, row-major: `sum gamma gamma^T`.
    a: Vec<f64>,
    /// `L x K`, row-major: `sum z gamma^T`.
    b: Vec<f64>,
    t: u64,
    xi: u64,
}

impl OnlineDlState {
    pub fn new(k: usize, l: usize) -> Self {
        Self { k, l, a: vec![0.0; k * k], b: vec![0.0; l * k], t: 0, xi: 0 }
    }

    /// State with explicit accumulators (row-major `K x K` and `L x K`).
    pub fn from_parts(k: usize, l: usize, a: Vec<f64>, b: Vec<f64>, t: u64) -> Result<Self> {
        if a.len() != k * k || b.len() != l * k {
            return Err(Error::DimensionMismatch("accumulator sizes do not match K and L".into()));
        }
        Ok(Self { k, l, a, b, t, xi: 0 })
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn xi(&self) -> u64 {
        self.xi
    }

    /// Folds one batch of codes into the accumulators with forgetting factor
    /// `beta`.
    pub fn accumulate(&mut self, z: &SignalMatrix, code: &SparseCode, beta: f64) {
        let (k, l) = (self.k, self.l);
        self.a.iter_mut().for_each(|v| *v *= beta);
        self.b.iter_mut().for_each(|v| *v *= beta);
        for (col, zc) in code.columns().iter().zip(z.columns()) {
            for (&p, &cp) in col.support.iter().zip(&col.coeffs) {
                for (&q, &cq) in col.support.iter().zip(&col.coeffs) {
                    self.a[p * k + q] += cp * cq;
                }
                for r in 0..l {
                    self.b[r * k + p] += zc[r] * cp;
                }
            }
        }
    }
}

/// `tr(D^T D A) - 2 tr(D^T B)` with atoms as the columns of `D`.
pub fn surrogate_objective(state: &OnlineDlState, d: &Dictionary) -> f64 {
    let (k, l) = (state.k, state.l);
    let mut quad = 0.0;
    for i in 0..k {
        for j in 0..k {
            let aij = state.a[i * k + j];
            if aij != 0.0 {
                quad += aij * dot(d.atom(i), d.atom(j));
            }
        }
    }
    let mut lin = 0.0;
    for j in 0..k {
        let atom = d.atom(j);
        for r in 0..l {
            lin += atom[r] * state.b[r * k + j];
        }
    }
    quad - 2.0 * lin
}

/// One block-coordinate sweep over all atoms. Each atom is replaced by the
/// exact minimizer of the surrogate with the others held fixed and, when
/// `normalize` is set, rescaled to unit norm immediately. Returns the number
/// of atoms skipped because their accumulator diagonal is below
/// [`BCD_MIN_USAGE`].
pub fn block_coordinate_sweep(state: &OnlineDlState, d: &mut Dictionary, normalize: bool) -> usize {
    let (k, l) = (state.k, state.l);
    let mut skipped = 0;
    let mut u = vec![0.0; l];
    for j in 0..k {
        let ajj = state.a[j * k + j];
        if ajj < BCD_MIN_USAGE {
            skipped += 1;
            continue;
        }
        // u = (B_j - D A_j) / A_jj + d_j
        for r in 0..l {
            u[r] = state.b[r * k + j];
        }
        for i in 0..k {
            let aij = state.a[i * k + j];
            if aij != 0.0 {
                axpy(-aij, d.atom(i), &mut u);
            }
        }
        let inv = 1.0 / ajj;
        let atom = d.atom(j);
        for r in 0..l {
            u[r] = u[r] * inv + atom[r];
        }
        if normalize && !normalize_in_place(&mut u) {
            skipped += 1;
            continue;
        }
        d.atom_mut(j).copy_from_slice(&u);
    }
    skipped
}

/// Report from one online BCD update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BcdReport {
    pub beta: f64,
    pub skipped_atoms: usize,
}

/// Accumulates the batch statistics with the adaptive forgetting factor, then
/// runs one normalized block-coordinate sweep.
pub fn online_bcd_update(
    state: &mut OnlineDlState,
    d: &mut Dictionary,
    z: &SignalMatrix,
    code: &SparseCode,
) -> Result<BcdReport> {
    if state.k != d.k() || state.l != d.l() {
        return Err(Error::DimensionMismatch(format!(
            "online state is {}x{}, dictionary is {}x{}",
            state.k,
            state.l,
            d.k(),
            d.l()
        )));
    }
    check_code_dims(d, z, code)?;
    state.t += 1;
    state.xi = z.count() as u64;
    let beta = adaptive_beta(state.t, state.xi);
    state.accumulate(z, code, beta);
    let skipped_atoms = block_coordinate_sweep(state, d, true);
    if skipped_atoms > 0 {
        log::debug!("bcd: {skipped_atoms} atoms skipped (unused)");
    }
    Ok(BcdReport { beta, skipped_atoms })
}

/// Replaces atoms used fewer than `threshold` times with random normalized
/// columns of `z`. Returns the number of atoms replaced.
pub fn reseed_dead_atoms(
    d: &mut Dictionary,
    usage_counts: &[u64],
    z: &SignalMatrix,
    threshold: u64,
    seed: u64,
) -> Result<usize> {
    if usage_counts.len() != d.k() {
        return Err(Error::DimensionMismatch(format!(
            "usage has {} entries, dictionary has {} atoms",
            usage_counts.len(),
            d.k()
        )));
    }
    if z.dim() != d.l() {
        return Err(Error::DimensionMismatch(format!("signal dim {} != dictionary dim {}", z.dim(), d.l())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reseeded = 0;
    for (k, &count) in usage_counts.iter().enumerate() {
        if count >= threshold {
            continue;
        }
        // a handful of draws to dodge zero columns
        for _ in 0..16 {
            let j = rand::Rng::random_range(&mut rng, 0..z.count());
            let mut col = z.col(j).to_vec();
            if normalize_in_place(&mut col) {
                d.atom_mut(k).copy_from_slice(&col);
                reseeded += 1;
                break;
            }
        }
    }
    Ok(reseeded)
}
