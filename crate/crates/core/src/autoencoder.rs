//! Affine encoder/decoder around the bottleneck, with hand-derived
//! gradients and the joint training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bottleneck::{dl_objective, Bottleneck, BottleneckAux, BottleneckKind, CodedUnits};
use crate::dictionary::{
    apply_gradient_update, dict_gradient, init_dictionary, online_bcd_update, reseed_dead_atoms, Dictionary,
    InitStrategy, OnlineDlState,
};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::metrics::{mse, perplexity, psnr_from_mse, utilization, UsageHistogram, DEFAULT_PEAK};
use crate::optim::Adam;
use crate::tensor::{unfold_batch, CodingUnit, LatentShape, PatchGeometry, SignalMatrix};
use crate::vq::{ema_update, Codebook};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoderMode {
    /// Identity encoder and decoder; the latent is the input itself.
    #[default]
    RawPatch,
    Affine,
}

impl std::str::FromStr for CoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "raw" | "rawpatch" | "raw_patch" => Ok(Self::RawPatch),
            "affine" => Ok(Self::Affine),
            other => Err(Error::Config(format!("unknown coder mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for CoderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CoderMode::RawPatch => "raw",
            CoderMode::Affine => "affine",
        })
    }
}

/// `z = W_e x + b_e`, `x^ = W_d z + b_d`. Matrices are row-major:
/// `enc_w` is `L x M`, `dec_w` is `M x L`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineCoder {
    pub m: usize,
    pub l: usize,
    pub enc_w: Vec<f64>,
    pub enc_b: Vec<f64>,
    pub dec_w: Vec<f64>,
    pub dec_b: Vec<f64>,
    pub mode: CoderMode,
}

impl AffineCoder {
    pub fn raw(m: usize) -> Self {
        Self {
            m,
            l: m,
            enc_w: Vec::new(),
            enc_b: Vec::new(),
            dec_w: Vec::new(),
            dec_b: Vec::new(),
            mode: CoderMode::RawPatch,
        }
    }

    pub fn affine(m: usize, l: usize, enc_w: Vec<f64>, enc_b: Vec<f64>, dec_w: Vec<f64>, dec_b: Vec<f64>) -> Result<Self> {
        if enc_w.len() != l * m || enc_b.len() != l || dec_w.len() != m * l || dec_b.len() != m {
            return Err(Error::DimensionMismatch(format!("affine coder parameters do not match M={m}, L={l}")));
        }
        let c = Self { m, l, enc_w, enc_b, dec_w, dec_b, mode: CoderMode::Affine };
        if !c.is_finite() {
            return Err(Error::InvalidParameter("affine coder has non-finite parameters".into()));
        }
        Ok(c)
    }

    /// Encoder rows are a random orthonormal set (Gaussian if `l > m`), the
    /// decoder its transpose, biases zero.
    pub fn init_affine(m: usize, l: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc_w: Vec<f64> = (0..l * m).map(|_| StandardNormal.sample(&mut rng)).collect();
        if l <= m {
            for i in 0..l {
                for p in 0..i {
                    let (head, tail) = enc_w.split_at_mut(i * m);
                    let prev = &head[p * m..(p + 1) * m];
                    let row = &mut tail[..m];
                    let c = dot(prev, row);
                    row.iter_mut().zip(prev).for_each(|(r, q)| *r -= c * q);
                }
                let row = &mut enc_w[i * m..(i + 1) * m];
                let n = norm(row);
                row.iter_mut().for_each(|v| *v /= n);
            }
        } else {
            let scale = 1.0 / (m as f64).sqrt();
            enc_w.iter_mut().for_each(|v| *v *= scale);
        }
        let mut dec_w = vec![0.0; m * l];
        for r in 0..l {
            for c in 0..m {
                dec_w[c * l + r] = enc_w[r * m + c];
            }
        }
        Self { m, l, enc_w, enc_b: vec![0.0; l], dec_w, dec_b: vec![0.0; m], mode: CoderMode::Affine }
    }

    pub fn is_finite(&self) -> bool {
        [&self.enc_w, &self.enc_b, &self.dec_w, &self.dec_b].iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

fn affine_map(w: &[f64], b: &[f64], rows: usize, cols: usize, x: &SignalMatrix) -> Result<SignalMatrix> {
    let mut out = SignalMatrix::zeros(rows, x.count());
    for j in 0..x.count() {
        let xc = x.col(j);
        let oc = out.col_mut(j);
        for r in 0..rows {
            oc[r] = dot(&w[r * cols..(r + 1) * cols], xc) + b[r];
        }
    }
    Ok(out)
}

pub fn encode(x: &SignalMatrix, c: &AffineCoder) -> Result<SignalMatrix> {
    if x.dim() != c.m {
        return Err(Error::DimensionMismatch(format!("input dim {} != coder input dim {}", x.dim(), c.m)));
    }
    match c.mode {
        CoderMode::RawPatch => Ok(x.clone()),
        CoderMode::Affine => affine_map(&c.enc_w, &c.enc_b, c.l, c.m, x),
    }
}

pub fn decode(zhat: &SignalMatrix, c: &AffineCoder) -> Result<SignalMatrix> {
    if zhat.dim() != c.l {
        return Err(Error::DimensionMismatch(format!("latent dim {} != coder latent dim {}", zhat.dim(), c.l)));
    }
    match c.mode {
        CoderMode::RawPatch => Ok(zhat.clone()),
        CoderMode::Affine => affine_map(&c.dec_w, &c.dec_b, c.m, c.l, zhat),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateRule {
    #[default]
    Gradient,
    Bcd,
}

impl std::str::FromStr for UpdateRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gradient" | "adam" => Ok(Self::Gradient),
            "bcd" => Ok(Self::Bcd),
            other => Err(Error::Config(format!("unknown update rule {other:?}"))),
        }
    }
}

impl std::fmt::Display for UpdateRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UpdateRule::Gradient => "gradient",
            UpdateRule::Bcd => "bcd",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub k: usize,
    /// Latent feature dim (Affine mode); RawPatch uses the input dim.
    pub l: usize,
    pub s: usize,
    pub beta: f64,
    /// Weight of the l2 reconstruction term.
    pub eta: f64,
    pub ema_decay: f64,
    pub ema_epsilon: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Batch order generator; derived from `seed` when unset.
    pub shuffle_seed: Option<u64>,
    pub kind: BottleneckKind,
    pub update_rule: UpdateRule,
    pub geometry: PatchGeometry,
    /// Atoms used fewer times than this in an epoch are reseeded; 0 disables.
    pub reseed_threshold: u64,
    pub coder: CoderMode,
    /// `None` samples data columns when there are enough, else Gaussian.
    pub init: Option<InitStrategy>,
    /// Also apply the codebook loss gradient to VQ codewords (besides EMA).
    pub vq_codebook_loss: bool,
    pub peak: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 512,
            l: 16,
            s: 5,
            beta: 0.25,
            eta: 1.0,
            ema_decay: 0.99,
            ema_epsilon: 1e-5,
            lr: 1e-4,
            epochs: 50,
            batch_size: 128,
            seed: 0,
            shuffle_seed: None,
            kind: BottleneckKind::Dl,
            update_rule: UpdateRule::Gradient,
            geometry: PatchGeometry::fiber(),
            reseed_threshold: 0,
            coder: CoderMode::RawPatch,
            init: None,
            vq_codebook_loss: false,
            peak: DEFAULT_PEAK,
        }
    }
}

const SHUFFLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

impl TrainConfig {
    pub fn shuffle_seed(&self) -> u64 {
        self.shuffle_seed.unwrap_or(self.seed ^ SHUFFLE_SALT)
    }

    /// Latent shape of one sample with input dim `m`.
    pub fn latent_shape(&self, m: usize) -> Result<LatentShape> {
        match (self.coder, self.geometry.coding_unit) {
            (CoderMode::Affine, _) => Ok(LatentShape::fiber(self.l)),
            (CoderMode::RawPatch, CodingUnit::Fiber) => Ok(LatentShape::fiber(m)),
            (CoderMode::RawPatch, CodingUnit::Patch) => {
                let side = (m as f64).sqrt().round() as usize;
                if side * side != m {
                    return Err(Error::Config(format!("patch coding needs square inputs, got dim {m}")));
                }
                Ok(LatentShape::new(side, side, 1))
            }
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        let shape = self.latent_shape(m)?;
        self.geometry.validate(shape.h, shape.w)?;
        let unit_dim = self.geometry.signal_dim(shape.l);
        if self.kind != BottleneckKind::Identity && self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.kind == BottleneckKind::Dl && (self.s == 0 || self.s > self.k.min(unit_dim)) {
            return Err(Error::Config(format!(
                "sparsity {} must lie in 1..=min(k={}, unit dim={unit_dim})",
                self.s, self.k
            )));
        }
        if self.kind == BottleneckKind::Vq && self.geometry.coding_unit == CodingUnit::Patch {
            return Err(Error::Config("vq codes fibers; patch geometry is dl-only".into()));
        }
        if self.coder == CoderMode::Affine && self.l == 0 {
            return Err(Error::Config("latent dim l must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.peak > 0.0) {
            return Err(Error::Config("peak must be positive".into()));
        }
        if unit_dim > self.k && self.kind != BottleneckKind::Identity {
            self.geometry.check_overcomplete(shape.l, self.k);
        }
        Ok(())
    }
}

/// Gradients of the training objective for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub enc_w: Vec<f64>,
    pub enc_b: Vec<f64>,
    pub dec_w: Vec<f64>,
    pub dec_b: Vec<f64>,
    /// Codebook-term gradient on the atoms (row-major `K x dim`), when the
    /// bottleneck has atoms.
    pub atoms: Option<Vec<f64>>,
}

/// One forward pass with everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub z_e: SignalMatrix,
    pub zhat: SignalMatrix,
    pub x_hat: SignalMatrix,
    pub coded: CodedUnits,
    pub recon_mse: f64,
    pub codebook_term: f64,
    pub commitment_term: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub recon_mse: f64,
    pub latent_mse: f64,
    pub codebook_term: f64,
    pub commitment_term: f64,
    pub loss: f64,
    pub usage: UsageHistogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mse: f64,
    pub psnr: f64,
    pub perplexity: f64,
    pub utilization: f64,
    pub codebook_term: f64,
    pub commitment_term: f64,
    pub latent_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub recon_mse: f64,
    pub psnr: f64,
    pub latent_mse: f64,
    pub perplexity: f64,
    pub utilization: f64,
}

/// Coder, bottleneck, and optimizer state.
#[derive(Debug, Clone)]
pub struct Model {
    pub coder: AffineCoder,
    pub bottleneck: Bottleneck,
    pub shape: LatentShape,
    enc_w_opt: Adam,
    enc_b_opt: Adam,
    dec_w_opt: Adam,
    dec_b_opt: Adam,
    atom_opt: Adam,
    online: Option<OnlineDlState>,
}

/// Codewords drawn from data columns as-is (no normalization).
fn sample_codewords(k: usize, units: &SignalMatrix, seed: u64) -> Result<Dictionary> {
    if units.count() < k {
        return Err(Error::InsufficientData { needed: k, available: units.count() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..units.count()).collect();
    order.shuffle(&mut rng);
    let mut atoms = Vec::with_capacity(k * units.dim());
    for &j in &order[..k] {
        atoms.extend_from_slice(units.col(j));
    }
    Dictionary::from_atoms(k, units.dim(), atoms)
}

impl Model {
    /// Builds a model for inputs of dimension `data.dim()`. Atom
    /// initialization may sample encoded columns of `data`.
    pub fn new(data: &SignalMatrix, cfg: &TrainConfig) -> Result<Self> {
        let m = data.dim();
        cfg.validate(m)?;
        let coder = match cfg.coder {
            CoderMode::RawPatch => AffineCoder::raw(m),
            CoderMode::Affine => AffineCoder::init_affine(m, cfg.l, cfg.seed),
        };
        let shape = cfg.latent_shape(m)?;
        let unit_dim = cfg.geometry.signal_dim(shape.l);
        let units = unfold_batch(&encode(data, &coder)?, shape, &cfg.geometry)?;
        let strategy = cfg.init.unwrap_or(if units.count() >= cfg.k {
            InitStrategy::DataSample
        } else {
            InitStrategy::GaussianNormalized
        });
        let dict_seed = cfg.seed.wrapping_add(1);
        let bottleneck = match cfg.kind {
            BottleneckKind::Identity => Bottleneck::Identity,
            BottleneckKind::Vq => {
                let e = match strategy {
                    InitStrategy::DataSample => sample_codewords(cfg.k, &units, dict_seed)?,
                    InitStrategy::GaussianNormalized => init_dictionary(cfg.k, unit_dim, strategy, dict_seed, None)?,
                };
                Bottleneck::Vq(Codebook::new(e, cfg.ema_decay, cfg.ema_epsilon)?)
            }
            BottleneckKind::Dl => Bottleneck::Dl {
                dictionary: init_dictionary(cfg.k, unit_dim, strategy, dict_seed, Some(&units))?,
                sparsity: cfg.s,
                geometry: cfg.geometry,
            },
        };
        Ok(Self::from_parts(coder, bottleneck, shape, cfg))
    }

    pub fn from_parts(coder: AffineCoder, bottleneck: Bottleneck, shape: LatentShape, cfg: &TrainConfig) -> Self {
        let atom_len = bottleneck.dictionary().map_or(0, |d| d.atoms().len());
        let online = match (&bottleneck, cfg.update_rule) {
            (Bottleneck::Dl { dictionary, .. }, UpdateRule::Bcd) => Some(OnlineDlState::new(dictionary.k(), dictionary.l())),
            _ => None,
        };
        Self {
            enc_w_opt: Adam::new(coder.enc_w.len()),
            enc_b_opt: Adam::new(coder.enc_b.len()),
            dec_w_opt: Adam::new(coder.dec_w.len()),
            dec_b_opt: Adam::new(coder.dec_b.len()),
            atom_opt: Adam::new(atom_len),
            online,
            coder,
            bottleneck,
            shape,
        }
    }

    /// encode -> bottleneck -> straight-through -> decode, plus loss terms.
    pub fn forward(&self, x: &SignalMatrix, cfg: &TrainConfig) -> Result<ForwardPass> {
        self.forward_target(x, x, cfg)
    }

    /// Like [`Model::forward`], scoring the reconstruction against `target`
    /// instead of the input.
    pub fn forward_target(&self, x: &SignalMatrix, target: &SignalMatrix, cfg: &TrainConfig) -> Result<ForwardPass> {
        if target.dim() != x.dim() || target.count() != x.count() {
            return Err(Error::DimensionMismatch("target shape differs from input".into()));
        }
        let z_e = encode(x, &self.coder)?;
        let (zhat, coded) = self.bottleneck.forward_batch(&z_e, self.shape)?;
        // straight-through: the decoder sees exactly zhat
        let x_hat = decode(&zhat, &self.coder)?;
        let recon_mse = mse(x_hat.data(), target.data())?;
        let latent = mse(z_e.data(), zhat.data())?;
        let (codebook_term, commitment_term) = match self.bottleneck {
            Bottleneck::Identity => (0.0, 0.0),
            _ => (latent, latent),
        };
        let loss = dl_objective(cfg.eta * recon_mse, codebook_term, commitment_term, cfg.beta);
        Ok(ForwardPass { z_e, zhat, x_hat, coded, recon_mse, codebook_term, commitment_term, loss })
    }

    /// Backward pass with the bottleneck treated as identity for the encoder.
    pub fn gradients(&self, x: &SignalMatrix, fp: &ForwardPass, cfg: &TrainConfig) -> Result<Gradients> {
        self.gradients_target(x, x, fp, cfg)
    }

    pub fn gradients_target(
        &self,
        x: &SignalMatrix,
        target: &SignalMatrix,
        fp: &ForwardPass,
        cfg: &TrainConfig,
    ) -> Result<Gradients> {
        let c = &self.coder;
        let n = x.count();
        let (m, l) = (c.m, c.l);
        let mut g = Gradients {
            enc_w: vec![0.0; c.enc_w.len()],
            enc_b: vec![0.0; c.enc_b.len()],
            dec_w: vec![0.0; c.dec_w.len()],
            dec_b: vec![0.0; c.dec_b.len()],
            atoms: None,
        };
        if c.mode == CoderMode::Affine {
            let recon_scale = cfg.eta * 2.0 / (m * n) as f64;
            let commit_scale = cfg.beta * 2.0 / (l * n) as f64;
            let mut gx = vec![0.0; m];
            let mut gz = vec![0.0; l];
            for j in 0..n {
                let (xc, xh) = (x.col(j), fp.x_hat.col(j));
                for (r, t) in target.col(j).iter().enumerate() {
                    gx[r] = recon_scale * (xh[r] - t);
                }
                let (ze, zh) = (fp.z_e.col(j), fp.zhat.col(j));
                for r in 0..m {
                    g.dec_b[r] += gx[r];
                    let row = &mut g.dec_w[r * l..(r + 1) * l];
                    for (w, z) in row.iter_mut().zip(zh) {
                        *w += gx[r] * z;
                    }
                }
                for q in 0..l {
                    let mut v = 0.0;
                    for r in 0..m {
                        v += c.dec_w[r * l + q] * gx[r];
                    }
                    gz[q] = v + commit_scale * (ze[q] - zh[q]);
                }
                for q in 0..l {
                    g.enc_b[q] += gz[q];
                    let row = &mut g.enc_w[q * m..(q + 1) * m];
                    for (w, xv) in row.iter_mut().zip(xc) {
                        *w += gz[q] * xv;
                    }
                }
            }
        }
        let units = &fp.coded.units;
        let scale = 1.0 / (units.dim() * units.count()) as f64;
        g.atoms = match (&self.bottleneck, &fp.coded.aux) {
            (Bottleneck::Dl { dictionary, .. }, BottleneckAux::Code(code)) => {
                Some(dict_gradient(dictionary, units, code)?.into_iter().map(|v| v * scale).collect())
            }
            (Bottleneck::Vq(cb), BottleneckAux::Assignment(a)) => {
                let code = a.to_sparse_code(cb.k())?;
                Some(dict_gradient(cb.embeddings(), units, &code)?.into_iter().map(|v| v * scale).collect())
            }
            _ => None,
        };
        Ok(g)
    }

    /// One joint optimization step on a batch.
    pub fn train_step(&mut self, x: &SignalMatrix, cfg: &TrainConfig) -> Result<StepMetrics> {
        self.train_step_target(x, x, cfg)
    }

    pub fn train_step_target(&mut self, x: &SignalMatrix, target: &SignalMatrix, cfg: &TrainConfig) -> Result<StepMetrics> {
        let fp = self.forward_target(x, target, cfg)?;
        if !fp.loss.is_finite() {
            return Err(Error::Divergence(format!(
                "loss is {} (recon {}, codebook {})",
                fp.loss, fp.recon_mse, fp.codebook_term
            )));
        }
        let grads = self.gradients_target(x, target, &fp, cfg)?;
        if self.coder.mode == CoderMode::Affine {
            self.enc_w_opt.step(&mut self.coder.enc_w, &grads.enc_w, cfg.lr);
            self.enc_b_opt.step(&mut self.coder.enc_b, &grads.enc_b, cfg.lr);
            self.dec_w_opt.step(&mut self.coder.dec_w, &grads.dec_w, cfg.lr);
            self.dec_b_opt.step(&mut self.coder.dec_b, &grads.dec_b, cfg.lr);
        }
        match (&mut self.bottleneck, &fp.coded.aux) {
            (Bottleneck::Vq(cb), BottleneckAux::Assignment(a)) => {
                if cfg.vq_codebook_loss {
                    if let Some(g) = &grads.atoms {
                        self.atom_opt.step(cb.embeddings_mut().atoms_mut(), g, cfg.lr);
                    }
                }
                ema_update(cb, &fp.coded.units, a)?;
            }
            (Bottleneck::Dl { dictionary, .. }, BottleneckAux::Code(code)) => match cfg.update_rule {
                UpdateRule::Gradient => {
                    if let Some(g) = &grads.atoms {
                        apply_gradient_update(dictionary, g, &mut self.atom_opt, cfg.lr)?;
                    }
                }
                UpdateRule::Bcd => {
                    let state = self
                        .online
                        .get_or_insert_with(|| OnlineDlState::new(dictionary.k(), dictionary.l()));
                    online_bcd_update(state, dictionary, &fp.coded.units, code)?;
                }
            },
            _ => {}
        }
        if !self.coder.is_finite() || self.bottleneck.dictionary().is_some_and(|d| d.atoms().iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence("parameters became non-finite".into()));
        }
        Ok(StepMetrics {
            recon_mse: fp.recon_mse,
            latent_mse: mse(fp.z_e.data(), fp.zhat.data())?,
            codebook_term: fp.codebook_term,
            commitment_term: fp.commitment_term,
            loss: fp.loss,
            usage: fp.coded.usage,
        })
    }

    /// Metrics over a whole dataset without updating anything.
    pub fn evaluate(&self, data: &SignalMatrix, cfg: &TrainConfig) -> Result<EvalMetrics> {
        let fp = self.forward(data, cfg)?;
        let (perplexity, utilization) = usage_stats(&fp.coded.usage);
        Ok(EvalMetrics {
            recon_mse: fp.recon_mse,
            psnr: psnr_from_mse(fp.recon_mse, cfg.peak),
            latent_mse: mse(fp.z_e.data(), fp.zhat.data())?,
            perplexity,
            utilization,
        })
    }

    /// Replaces atoms used fewer than `threshold` times.
    fn reseed(&mut self, usage: &UsageHistogram, data: &SignalMatrix, threshold: u64, seed: u64) -> Result<usize> {
        let units = unfold_batch(&encode(data, &self.coder)?, self.shape, &self.bottleneck.geometry())?;
        match &mut self.bottleneck {
            Bottleneck::Dl { dictionary, .. } => reseed_dead_atoms(dictionary, usage.counts(), &units, threshold, seed),
            Bottleneck::Vq(cb) => {
                let n = reseed_dead_atoms(cb.embeddings_mut(), usage.counts(), &units, threshold, seed)?;
                Ok(n)
            }
            Bottleneck::Identity => Ok(0),
        }
    }
}

fn usage_stats(h: &UsageHistogram) -> (f64, f64) {
    if h.total() == 0 {
        return (f64::NAN, f64::NAN);
    }
    (perplexity(h).unwrap_or(f64::NAN), utilization(h).unwrap_or(f64::NAN))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochMetrics>,
}

/// Trains a fresh model on `data` (one sample per column).
pub fn train(data: &SignalMatrix, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let model = Model::new(data, cfg)?;
    train_model(model, data, cfg)
}

/// Continues training an existing model, one metrics row per epoch.
pub fn train_model(model: Model, data: &SignalMatrix, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_model_target(model, data, data, cfg)
}

/// Training where column `j` of `inputs` should reconstruct column `j` of
/// `targets` (e.g. corrupted inputs, clean targets).
pub fn train_model_target(
    mut model: Model,
    inputs: &SignalMatrix,
    targets: &SignalMatrix,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if targets.dim() != inputs.dim() || targets.count() != inputs.count() {
        return Err(Error::DimensionMismatch("targets differ in shape from inputs".into()));
    }
    let data = inputs;
    let n = data.count();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed());
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut usage = UsageHistogram::new(model.bottleneck.atoms());
        let (mut recon, mut latent, mut cb_term, mut commit) = (0.0, 0.0, 0.0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            let batch = data.select_columns(idx);
            let step = if std::ptr::eq(inputs, targets) {
                model.train_step(&batch, cfg)?
            } else {
                model.train_step_target(&batch, &targets.select_columns(idx), cfg)?
            };
            let w = idx.len() as f64;
            recon += step.recon_mse * w;
            latent += step.latent_mse * w;
            cb_term += step.codebook_term * w;
            commit += step.commitment_term * w;
            usage.merge(&step.usage);
        }
        let nf = n as f64;
        let (perplexity, utilization) = usage_stats(&usage);
        let row = EpochMetrics {
            epoch,
            mse: recon / nf,
            psnr: psnr_from_mse(recon / nf, cfg.peak),
            perplexity,
            utilization,
            codebook_term: cb_term / nf,
            commitment_term: commit / nf,
            latent_mse: latent / nf,
        };
        log::info!(
            "epoch {epoch}: mse {:.6} psnr {:.2} perplexity {:.1} utilization {:.3}",
            row.mse,
            row.psnr,
            row.perplexity,
            row.utilization
        );
        history.push(row);
        if cfg.reseed_threshold > 0 {
            let reseeded = model.reseed(&usage, data, cfg.reseed_threshold, cfg.seed.wrapping_add(epoch as u64))?;
            if reseeded > 0 {
                log::info!("epoch {epoch}: reseeded {reseeded} atoms");
            }
        }
    }
    Ok(TrainOutcome { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> SignalMatrix {
        SignalMatrix::new(dim, n, (0..dim * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn raw_coder_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 5, 7);
        let c = AffineCoder::raw(5);
        assert_eq!(encode(&x, &c).unwrap(), x);
        assert_eq!(decode(&x, &c).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let c = AffineCoder::affine(3, 2, vec![0.0; 6], vec![0.5, -1.0], vec![0.0; 6], vec![1.0, 2.0, 3.0]).unwrap();
        let x = SignalMatrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let z = encode(&x, &c).unwrap();
        assert_eq!(z.data(), &[0.5, -1.0, 0.5, -1.0]);
        let y = decode(&z, &c).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn affine_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = AffineCoder::init_affine(6, 4, 3);
        let mut c = c;
        c.enc_b = vec![0.1, -0.2, 0.3, 0.0];
        let x = random_matrix(&mut rng, 6, 5);
        let z = encode(&x, &c).unwrap();
        for j in 0..5 {
            for r in 0..4 {
                let mut v = c.enc_b[r];
                for q in 0..6 {
                    v += c.enc_w[r * 6 + q] * x.col(j)[q];
                }
                assert!((z.col(j)[r] - v).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn decoder_inverse_recovers_input() {
        // W_e = [[2, 1], [1, 1]], inverse [[1, -1], [-1, 2]]
        let c = AffineCoder::affine(2, 2, vec![2.0, 1.0, 1.0, 1.0], vec![0.5, -0.5], vec![1.0, -1.0, -1.0, 2.0], vec![
            -1.0, 1.5,
        ])
        .unwrap();
        let x = SignalMatrix::new(2, 3, vec![0.1, 0.9, -2.0, 3.0, 0.0, 0.0]).unwrap();
        let back = decode(&encode(&x, &c).unwrap(), &c).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_bottleneck_raw_coder_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 4, 10);
        let cfg = TrainConfig { kind: BottleneckKind::Identity, ..TrainConfig::default() };
        let mut model = Model::new(&x, &cfg).unwrap();
        let fp = model.forward(&x, &cfg).unwrap();
        let g = model.gradients(&x, &fp, &cfg).unwrap();
        assert_eq!(fp.loss, 0.0);
        assert!(g.atoms.is_none() && g.enc_w.is_empty());
        let step = model.train_step(&x, &cfg).unwrap();
        assert_eq!(step.loss, 0.0);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(&mut rng, 4, 20);
        let cfg = TrainConfig { k: 8, s: 2, epochs: 0, ..TrainConfig::default() };
        let initial = Model::new(&x, &cfg).unwrap();
        let out = train(&x, &cfg).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.model.bottleneck, initial.bottleneck);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 8, 64);
        for kind in [BottleneckKind::Vq, BottleneckKind::Dl] {
            let cfg = TrainConfig {
                k: 16,
                l: 4,
                s: 2,
                epochs: 3,
                batch_size: 16,
                kind,
                coder: CoderMode::Affine,
                lr: 1e-3,
                ..TrainConfig::default()
            };
            let a = train(&x, &cfg).unwrap();
            let b = train(&x, &cfg).unwrap();
            assert_eq!(a.history, b.history);
        }
    }

    #[test]
    fn identity_training_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_matrix(&mut rng, 4, 64);
        let mut cfg = TrainConfig {
            kind: BottleneckKind::Identity,
            coder: CoderMode::Affine,
            l: 4,
            lr: 2e-3,
            epochs: 30,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut model = Model::new(&x, &cfg).unwrap();
        // perturb the decoder so there is something to learn
        model.coder.dec_b = vec![0.3; 4];
        cfg.epochs = 30;
        let out = train_model(model, &x, &cfg).unwrap();
        let mses: Vec<f64> = out.history.iter().map(|r| r.mse).collect();
        assert!(mses.last().unwrap() < &(mses[0] * 0.5), "{mses:?}");
        let increases = mses.windows(2).filter(|w| w[1] > w[0]).count();
        assert_eq!(increases, 0, "{mses:?}");
    }

    #[test]
    fn invalid_config_rejected() {
        let x = SignalMatrix::zeros(4, 4);
        let bad_s = TrainConfig { k: 8, s: 9, ..TrainConfig::default() };
        assert!(matches!(Model::new(&x, &bad_s), Err(Error::Config(_))));
        let bad_lr = TrainConfig { k: 8, s: 2, lr: 0.0, ..TrainConfig::default() };
        assert!(Model::new(&x, &bad_lr).is_err());
        let vq_patch = TrainConfig { k: 8, kind: BottleneckKind::Vq, geometry: PatchGeometry::patch(2, 2), ..TrainConfig::default() };
        assert!(Model::new(&x, &vq_patch).is_err());
    }

    #[test]
    fn patch_geometry_on_raw_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_matrix(&mut rng, 16, 40);
        let cfg = TrainConfig {
            k: 8,
            s: 2,
            epochs: 2,
            batch_size: 10,
            geometry: PatchGeometry::patch(2, 2),
            ..TrainConfig::default()
        };
        let out = train(&x, &cfg).unwrap();
        assert_eq!(out.model.shape, LatentShape::new(4, 4, 1));
        assert_eq!(out.model.bottleneck.dictionary().unwrap().l(), 4);
        assert_eq!(out.history.len(), 2);
    }
}
