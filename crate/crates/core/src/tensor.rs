//! Latent tensor layout and the unfold/fold permutations between latent
//! tensors and column-stacked signal matrices.

use crate::error::{Error, Result};

/// `H x W x L` latent tensor. Fiber `(i, j)` occupies
/// `data[((i * w) + j) * l..][..l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    h: usize,
    w: usize,
    l: usize,
    data: Vec<f64>,
}

impl LatentTensor {
    pub fn new(h: usize, w: usize, l: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || l == 0 {
            return Err(Error::InvalidParameter(format!(
                "latent dims must be positive, got {h}x{w}x{l}"
            )));
        }
        if data.len() != h * w * l {
            return Err(Error::DimensionMismatch(format!(
                "latent data length {} != {h}*{w}*{l}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("latent tensor contains non-finite values".into()));
        }
        Ok(Self { h, w, l, data })
    }

    pub fn zeros(h: usize, w: usize, l: usize) -> Self {
        Self { h, w, l, data: vec![0.0; h * w * l] }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.l)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn fiber(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.w + j) * self.l;
        &self.data[start..start + self.l]
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(i * self.w + j) * self.l + c]
    }
}

/// Column-major `dim x count` matrix; each column is one coding unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMatrix {
    dim: usize,
    count: usize,
    data: Vec<f64>,
}

impl SignalMatrix {
    pub fn new(dim: usize, count: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || count == 0 {
            return Err(Error::InvalidParameter(format!(
                "signal matrix dims must be positive, got {dim}x{count}"
            )));
        }
        if data.len() != dim * count {
            return Err(Error::DimensionMismatch(format!(
                "signal data length {} != {dim}*{count}",
                data.len()
            )));
        }
        Ok(Self { dim, count, data })
    }

    pub fn zeros(dim: usize, count: usize) -> Self {
        Self { dim, count, data: vec![0.0; dim * count] }
    }

    pub fn from_columns<'a, I>(dim: usize, columns: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut data = Vec::new();
        let mut count = 0;
        for col in columns {
            if col.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "column {count} has length {}, expected {dim}",
                    col.len()
                )));
            }
            data.extend_from_slice(col);
            count += 1;
        }
        Self::new(dim, count, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn columns(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Columns `idx[..]` gathered into a new matrix, in the given order.
    pub fn select_columns(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &j in idx {
            data.extend_from_slice(self.col(j));
        }
        Self { dim: self.dim, count: idx.len(), data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CodingUnit {
    #[default]
    Fiber,
    Patch,
}

/// Non-overlapping patch geometry used to cut a latent tensor into coding
/// units. In `Fiber` mode the patch extents are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub p_h: usize,
    pub p_w: usize,
    pub coding_unit: CodingUnit,
}

impl Default for PatchGeometry {
    fn default() -> Self {
        Self::fiber()
    }
}

impl PatchGeometry {
    pub fn fiber() -> Self {
        Self { p_h: 1, p_w: 1, coding_unit: CodingUnit::Fiber }
    }

    pub fn patch(p_h: usize, p_w: usize) -> Self {
        Self { p_h, p_w, coding_unit: CodingUnit::Patch }
    }

    fn extents(&self) -> (usize, usize) {
        match self.coding_unit {
            CodingUnit::Fiber => (1, 1),
            CodingUnit::Patch => (self.p_h, self.p_w),
        }
    }

    /// Signal dimension of one coding unit for latent feature dim `l`.
    pub fn signal_dim(&self, l: usize) -> usize {
        let (ph, pw) = self.extents();
        ph * pw * l
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let (ph, pw) = self.extents();
        if ph == 0 || pw == 0 {
            return Err(Error::InvalidParameter("patch extents must be positive".into()));
        }
        if h % ph != 0 || w % pw != 0 {
            return Err(Error::DimensionMismatch(format!(
                "latent {h}x{w} is not divisible by patch {ph}x{pw}"
            )));
        }
        Ok(())
    }

    /// Number of coding units for an `h x w` latent grid.
    pub fn unit_count(&self, h: usize, w: usize) -> usize {
        let (ph, pw) = self.extents();
        (h / ph) * (w / pw)
    }

    /// Logs a warning when the dictionary is not overcomplete for this geometry.
    pub fn check_overcomplete(&self, l: usize, k: usize) {
        let dim = self.signal_dim(l);
        if dim > k {
            log::warn!("coding unit dim {dim} exceeds atom count {k}; dictionary is undercomplete");
        }
    }
}

/// Cuts `z` into column-stacked coding units.
///
/// Fiber mode emits one column per `(i, j)`, row-major. Patch mode emits one
/// column per patch (patch grid row-major), each holding its fibers
/// concatenated row-major.
pub fn unfold(z: &LatentTensor, g: &PatchGeometry) -> Result<SignalMatrix> {
    let (h, w, l) = z.shape();
    g.validate(h, w)?;
    let (ph, pw) = g.extents();
    if ph == 1 && pw == 1 {
        return SignalMatrix::new(l, h * w, z.data.clone());
    }
    let dim = ph * pw * l;
    let mut data = Vec::with_capacity(h * w * l);
    for pi in 0..h / ph {
        for pj in 0..w / pw {
            for di in 0..ph {
                for dj in 0..pw {
                    data.extend_from_slice(z.fiber(pi * ph + di, pj * pw + dj));
                }
            }
        }
    }
    SignalMatrix::new(dim, (h / ph) * (w / pw), data)
}

/// Exact inverse of [`unfold`].
pub fn fold(m: &SignalMatrix, g: &PatchGeometry, h: usize, w: usize, l: usize) -> Result<LatentTensor> {
    if h == 0 || w == 0 || l == 0 {
        return Err(Error::InvalidParameter(format!(
            "latent dims must be positive, got {h}x{w}x{l}"
        )));
    }
    g.validate(h, w)?;
    let (ph, pw) = g.extents();
    let dim = ph * pw * l;
    let count = (h / ph) * (w / pw);
    if m.dim() != dim || m.count() != count {
        return Err(Error::DimensionMismatch(format!(
            "signal matrix {}x{} does not match geometry ({dim}x{count}) for {h}x{w}x{l}",
            m.dim(),
            m.count()
        )));
    }
    if ph == 1 && pw == 1 {
        return LatentTensor::new(h, w, l, m.data.clone());
    }
    let mut data = vec![0.0; h * w * l];
    let grid_w = w / pw;
    for (p, col) in m.columns().enumerate() {
        let (pi, pj) = (p / grid_w, p % grid_w);
        for di in 0..ph {
            for dj in 0..pw {
                let src = (di * pw + dj) * l;
                let dst = ((pi * ph + di) * w + (pj * pw + dj)) * l;
                data[dst..dst + l].copy_from_slice(&col[src..src + l]);
            }
        }
    }
    LatentTensor::new(h, w, l, data)
}

/// Per-sample latent shape for batches stored one sample per column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentShape {
    pub h: usize,
    pub w: usize,
    pub l: usize,
}

impl LatentShape {
    pub fn new(h: usize, w: usize, l: usize) -> Self {
        Self { h, w, l }
    }

    pub fn fiber(l: usize) -> Self {
        Self { h: 1, w: 1, l }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.l
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Unfolds every column of `z` (one sample's latent in fiber layout) and
/// concatenates the coding units sample by sample.
pub fn unfold_batch(z: &SignalMatrix, shape: LatentShape, g: &PatchGeometry) -> Result<SignalMatrix> {
    if z.dim() != shape.len() {
        return Err(Error::DimensionMismatch(format!(
            "sample dim {} != latent shape {}x{}x{}",
            z.dim(),
            shape.h,
            shape.w,
            shape.l
        )));
    }
    g.validate(shape.h, shape.w)?;
    if g.signal_dim(shape.l) == shape.len() {
        return Ok(z.clone());
    }
    let mut data = Vec::with_capacity(z.data().len());
    for col in z.columns() {
        let t = LatentTensor::new(shape.h, shape.w, shape.l, col.to_vec())?;
        data.extend(unfold(&t, g)?.into_data());
    }
    let dim = g.signal_dim(shape.l);
    SignalMatrix::new(dim, data.len() / dim, data)
}

/// Inverse of [`unfold_batch`].
pub fn fold_batch(units: &SignalMatrix, shape: LatentShape, g: &PatchGeometry) -> Result<SignalMatrix> {
    g.validate(shape.h, shape.w)?;
    let per_sample = g.unit_count(shape.h, shape.w);
    if units.dim() != g.signal_dim(shape.l) || units.count() % per_sample != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} units of dim {} cannot be folded into {}x{}x{} samples",
            units.count(),
            units.dim(),
            shape.h,
            shape.w,
            shape.l
        )));
    }
    if per_sample == 1 {
        return Ok(units.clone());
    }
    let mut data = Vec::with_capacity(units.data().len());
    let chunk = per_sample * units.dim();
    for block in units.data().chunks_exact(chunk) {
        let m = SignalMatrix::new(units.dim(), per_sample, block.to_vec())?;
        data.extend(fold(&m, g, shape.h, shape.w, shape.l)?.into_data());
    }
    SignalMatrix::new(shape.len(), units.count() / per_sample, data)
}
