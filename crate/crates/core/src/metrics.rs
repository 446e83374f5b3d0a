//! Reconstruction and collapse metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::tensor::LatentTensor;

pub const DEFAULT_PEAK: f64 = 1.0;

/// Mean of squared entry differences.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("mse over {} vs {} entries", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::UndefinedInput("mse of empty inputs".into()));
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// `10 log10(peak^2 / mse)`; infinite when `mse == 0`.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}

pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(format!("peak must be positive, got {peak}")));
    }
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

/// Per-atom selection counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageHistogram {
    counts: Vec<u64>,
    total: u64,
}

impl UsageHistogram {
    pub fn new(k: usize) -> Self {
        Self { counts: vec![0; k], total: 0 }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Self { counts, total }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn record(&mut self, atom: usize) {
        self.counts[atom] += 1;
        self.total += 1;
    }

    pub fn merge(&mut self, other: &UsageHistogram) {
        assert_eq!(self.counts.len(), other.counts.len(), "histogram sizes differ");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
    }

    pub fn used(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

/// Exponential of the entropy of the empirical usage distribution, in `[1, K]`.
pub fn perplexity(h: &UsageHistogram) -> Result<f64> {
    if h.total == 0 {
        return Err(Error::UndefinedInput("perplexity of an empty histogram".into()));
    }
    let total = h.total as f64;
    let entropy: f64 = h
        .counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

/// Fraction of atoms selected at least once.
pub fn utilization(h: &UsageHistogram) -> Result<f64> {
    if h.total == 0 {
        return Err(Error::UndefinedInput("utilization of an empty histogram".into()));
    }
    Ok(h.used() as f64 / h.k() as f64)
}

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 1000;
const POWER_SEED: u64 = 0x5eed;

/// Top right-singular vector of the `(H*W) x L` fiber matrix by power
/// iteration on its `L x L` Gram matrix. Sign fixed so the largest-magnitude
/// entry is positive. `None` for an all-zero tensor.
pub fn top_right_singular_vector(z: &LatentTensor) -> Option<Vec<f64>> {
    let l = z.l();
    let rows = z.h() * z.w();
    let mut gram = vec![0.0; l * l];
    for r in 0..rows {
        let f = &z.data()[r * l..(r + 1) * l];
        for i in 0..l {
            for j in 0..l {
                gram[i * l + j] += f[i] * f[j];
            }
        }
    }
    if gram.iter().all(|&v| v == 0.0) {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v: Vec<f64> = (0..l).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut next = vec![0.0; l];
    for _ in 0..POWER_MAX_ITERS {
        for i in 0..l {
            next[i] = dot(&gram[i * l..(i + 1) * l], &v);
        }
        let n = norm(&next);
        if n == 0.0 {
            return None;
        }
        next.iter_mut().for_each(|x| *x /= n);
        let delta: f64 = v.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut v, &mut next);
        if delta < POWER_TOL {
            break;
        }
    }
    let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Some(v)
}

/// Projects every fiber onto the top right-singular direction and min-max
/// normalizes the resulting `H x W` image (row-major) to `[0, 1]`. Zero
/// tensors (and constant projections) map to a zero image.
pub fn top_singular_projection(z: &LatentTensor) -> Vec<f64> {
    let rows = z.h() * z.w();
    let Some(v) = top_right_singular_vector(z) else {
        return vec![0.0; rows];
    };
    let l = z.l();
    let proj: Vec<f64> = (0..rows).map(|r| dot(&z.data()[r * l..(r + 1) * l], &v)).collect();
    let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; rows];
    }
    proj.iter().map(|p| (p - lo) / (hi - lo)).collect()
}

/// Weights that evaluate, at abscissa `at`, the least-squares polynomial of
/// degree `order` fitted to samples at `0..window`.
fn savgol_weights(window: usize, order: usize, at: usize) -> Vec<f64> {
    let n = order + 1;
    let half = (window / 2) as f64;
    // scaled abscissa keeps the normal equations well conditioned
    let x = |i: usize| (i as f64 - half) / half.max(1.0);
    let mut ata = vec![0.0; n * n];
    for i in 0..window {
        let xi = x(i);
        for p in 0..n {
            for q in 0..n {
                ata[p * n + q] += xi.powi((p + q) as i32);
            }
        }
    }
    let e: Vec<f64> = (0..n).map(|p| x(at).powi(p as i32)).collect();
    let c = crate::linalg::spd_solve(&ata, &e, n, 0.0).expect("Vandermonde normal matrix is SPD");
    (0..window).map(|i| (0..n).map(|p| c[p] * x(i).powi(p as i32)).sum()).collect()
}

/// Savitzky–Golay smoothing. Interior points use the centered window; the
/// first and last `window / 2` points are evaluated from the polynomial fitted
/// to the first (last) full window.
pub fn savitzky_golay(series: &[f64], window: usize, order: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 || window == 0 {
        return Err(Error::InvalidParameter(format!("window must be odd, got {window}")));
    }
    if order >= window {
        return Err(Error::InvalidParameter(format!("order {order} must be below window {window}")));
    }
    if series.len() < window {
        return Err(Error::InvalidParameter(format!(
            "series of length {} is shorter than window {window}",
            series.len()
        )));
    }
    let half = window / 2;
    let n = series.len();
    let weights: Vec<Vec<f64>> = (0..window).map(|at| savgol_weights(window, order, at)).collect();
    let apply = |start: usize, w: &[f64]| -> f64 { w.iter().zip(&series[start..start + window]).map(|(a, b)| a * b).sum() };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let v = if i < half {
            apply(0, &weights[i])
        } else if i + half >= n {
            apply(n - window, &weights[i + window - n])
        } else {
            apply(i - half, &weights[half])
        };
        out.push(v);
    }
    Ok(out)
}
