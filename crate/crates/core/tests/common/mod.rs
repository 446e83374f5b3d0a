#![allow(dead_code)]

use std::path::PathBuf;

use lasers::autoencoder::{CoderMode, Gradients, Model, TrainConfig};
use lasers::bottleneck::{BottleneckAux, BottleneckKind};
use lasers::dictionary::{init_dictionary, Dictionary, InitStrategy};
use lasers::tensor::SignalMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn images_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/images")
}

/// Desk-scale paired image experiment: 512 x 16 latent codebook, sparsity 5.
pub fn paired_config(kind: BottleneckKind) -> TrainConfig {
    TrainConfig {
        kind,
        k: 512,
        l: 16,
        s: 5,
        coder: CoderMode::Affine,
        init: Some(InitStrategy::GaussianNormalized),
        lr: 1e-4,
        epochs: 50,
        batch_size: 128,
        seed: 3,
        ..TrainConfig::default()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v = gaussian_vec(rng, n);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> SignalMatrix {
    SignalMatrix::new(dim, n, (0..dim * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

pub fn gaussian_dictionary(k: usize, l: usize, seed: u64) -> Dictionary {
    init_dictionary(k, l, InitStrategy::GaussianNormalized, seed, None).unwrap()
}

fn mean_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `w (rows x cols, row-major) * v + b`
fn affine(w: &[f64], b: &[f64], v: &[f64]) -> Vec<f64> {
    let cols = v.len();
    b.iter()
        .enumerate()
        .map(|(r, bias)| bias + (0..cols).map(|c| w[r * cols + c] * v[c]).sum::<f64>())
        .collect()
}

/// Parameter groups of the audited objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    EncW,
    EncB,
    DecW,
    DecB,
    Atoms,
}

/// Training objective re-derived from scratch with the bottleneck output
/// frozen at `zhat0`: the decoder sees `z_e + (zhat0 - z_e0)` (value-level
/// straight-through), the commitment term pulls `z_e` toward the constant
/// `zhat0`, and the codebook term depends on the atoms through the frozen
/// code.
pub struct FrozenObjective {
    pub x: SignalMatrix,
    pub zhat0: SignalMatrix,
    pub offset: SignalMatrix,
    pub units: SignalMatrix,
    /// Dense code (units x K), when the bottleneck has atoms.
    pub code: Option<Vec<f64>>,
    pub eta: f64,
    pub beta: f64,
}

pub struct Params {
    pub enc_w: Vec<f64>,
    pub enc_b: Vec<f64>,
    pub dec_w: Vec<f64>,
    pub dec_b: Vec<f64>,
    pub atoms: Vec<f64>,
    pub k: usize,
}

impl Params {
    pub fn group_mut(&mut self, g: Group) -> &mut Vec<f64> {
        match g {
            Group::EncW => &mut self.enc_w,
            Group::EncB => &mut self.enc_b,
            Group::DecW => &mut self.dec_w,
            Group::DecB => &mut self.dec_b,
            Group::Atoms => &mut self.atoms,
        }
    }
}

impl FrozenObjective {
    pub fn new(model: &Model, x: &SignalMatrix, cfg: &TrainConfig) -> (Self, Params) {
        let fp = model.forward(x, cfg).unwrap();
        let mut offset = fp.zhat.clone();
        for (o, z) in offset.data_mut().iter_mut().zip(fp.z_e.data()) {
            *o -= z;
        }
        let (code, atoms, k) = match (&fp.coded.aux, model.bottleneck.dictionary()) {
            (BottleneckAux::Code(c), Some(d)) => (Some(c.to_dense()), d.atoms().to_vec(), d.k()),
            (BottleneckAux::Assignment(a), Some(d)) => {
                (Some(a.to_sparse_code(d.k()).unwrap().to_dense()), d.atoms().to_vec(), d.k())
            }
            _ => (None, Vec::new(), 0),
        };
        let c = &model.coder;
        let params = Params {
            enc_w: c.enc_w.clone(),
            enc_b: c.enc_b.clone(),
            dec_w: c.dec_w.clone(),
            dec_b: c.dec_b.clone(),
            atoms,
            k,
        };
        let obj = Self {
            x: x.clone(),
            zhat0: fp.zhat,
            offset,
            units: fp.coded.units,
            code,
            eta: cfg.eta,
            beta: cfg.beta,
        };
        (obj, params)
    }

    /// Reconstruction + beta * commitment + codebook.
    pub fn value(&self, p: &Params) -> f64 {
        let n = self.x.count();
        let (mut recon, mut commit) = (0.0, 0.0);
        for j in 0..n {
            let z = affine(&p.enc_w, &p.enc_b, self.x.col(j));
            let zst: Vec<f64> = z.iter().zip(self.offset.col(j)).map(|(a, b)| a + b).collect();
            let xh = affine(&p.dec_w, &p.dec_b, &zst);
            recon += mean_sq(&xh, self.x.col(j));
            commit += mean_sq(&z, self.zhat0.col(j));
        }
        let mut codebook = 0.0;
        if let Some(code) = &self.code {
            let (dim, count) = (self.units.dim(), self.units.count());
            for u in 0..count {
                for c in 0..dim {
                    let approx: f64 = (0..p.k).map(|a| code[u * p.k + a] * p.atoms[a * dim + c]).sum();
                    let e = self.units.col(u)[c] - approx;
                    codebook += e * e;
                }
            }
            codebook /= (dim * count) as f64;
        }
        self.eta * recon / n as f64 + self.beta * commit / n as f64 + codebook
    }

    pub fn finite_difference(&self, p: &mut Params, g: Group, h: f64) -> Vec<f64> {
        let len = p.group_mut(g).len();
        (0..len)
            .map(|i| {
                let orig = p.group_mut(g)[i];
                p.group_mut(g)[i] = orig + h;
                let up = self.value(p);
                p.group_mut(g)[i] = orig - h;
                let down = self.value(p);
                p.group_mut(g)[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }
}

pub fn analytic(grads: &Gradients, g: Group) -> Vec<f64> {
    match g {
        Group::EncW => grads.enc_w.clone(),
        Group::EncB => grads.enc_b.clone(),
        Group::DecW => grads.dec_w.clone(),
        Group::DecB => grads.dec_b.clone(),
        Group::Atoms => grads.atoms.clone().unwrap_or_default(),
    }
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Audit case: small affine model with perturbed parameters.
pub fn audit_model(kind: BottleneckKind, s: usize, seed: u64) -> (Model, SignalMatrix, TrainConfig) {
    let mut r = rng(seed);
    let x = uniform_matrix(&mut r, 12, 10);
    let cfg = TrainConfig {
        kind,
        k: 16,
        l: 8,
        s,
        eta: 1.3,
        beta: 0.25,
        coder: CoderMode::Affine,
        init: Some(InitStrategy::GaussianNormalized),
        seed,
        ..TrainConfig::default()
    };
    let mut model = Model::new(&x, &cfg).unwrap();
    let c = &mut model.coder;
    for v in c.enc_w.iter_mut().chain(c.dec_w.iter_mut()) {
        *v += 0.2 * normal(&mut r);
    }
    for v in c.enc_b.iter_mut().chain(c.dec_b.iter_mut()) {
        *v = 0.1 * normal(&mut r);
    }
    (model, x, cfg)
}

/// Worst relative error per group for one audit case; the extra entry is
/// the isolated commitment gradient on the encoder.
pub fn audit(kind: BottleneckKind, s: usize, seed: u64) -> Vec<(String, f64)> {
    const H: f64 = 1e-5;
    let (model, x, cfg) = audit_model(kind, s, seed);
    let fp = model.forward(&x, &cfg).unwrap();
    let grads = model.gradients(&x, &fp, &cfg).unwrap();
    let (obj, mut params) = FrozenObjective::new(&model, &x, &cfg);
    let mut groups = vec![Group::EncW, Group::EncB, Group::DecW, Group::DecB];
    if obj.code.is_some() {
        groups.push(Group::Atoms);
    }
    let mut out: Vec<(String, f64)> = groups
        .iter()
        .map(|&g| {
            let fd = obj.finite_difference(&mut params, g, H);
            (format!("{g:?}"), rel_error(&fd, &analytic(&grads, g)))
        })
        .collect();

    // commitment alone: difference of objectives with and without beta
    let no_commit = TrainConfig { beta: 0.0, ..cfg.clone() };
    let g0 = model.gradients(&x, &fp, &no_commit).unwrap();
    let (obj0, _) = FrozenObjective::new(&model, &x, &no_commit);
    for g in [Group::EncW, Group::EncB] {
        let fd_full = obj.finite_difference(&mut params, g, H);
        let fd_base = obj0.finite_difference(&mut params, g, H);
        let fd: Vec<f64> = fd_full.iter().zip(&fd_base).map(|(a, b)| a - b).collect();
        let an: Vec<f64> = analytic(&grads, g).iter().zip(analytic(&g0, g)).map(|(a, b)| a - b).collect();
        out.push((format!("Commitment{g:?}"), rel_error(&fd, &an)));
    }
    out
}
