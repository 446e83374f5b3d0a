//! The compression bottleneck between encoder and decoder: identity, vector
//! quantization, or sparse dictionary coding.

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::metrics::UsageHistogram;
use crate::sparse_coding::{batch_omp, reconstruct, SparseCode};
use crate::tensor::{fold, fold_batch, unfold, unfold_batch, LatentShape, LatentTensor, PatchGeometry, SignalMatrix};
use crate::vq::{assign, one_hot_reconstruct, vq_losses, Assignment, Codebook};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BottleneckKind {
    Identity,
    Vq,
    #[default]
    Dl,
}

impl std::fmt::Display for BottleneckKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BottleneckKind::Identity => "identity",
            BottleneckKind::Vq => "vq",
            BottleneckKind::Dl => "dl",
        })
    }
}

impl std::str::FromStr for BottleneckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "none" => Ok(Self::Identity),
            "vq" => Ok(Self::Vq),
            "dl" => Ok(Self::Dl),
            other => Err(Error::Config(format!("unknown bottleneck kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Bottleneck {
    Identity,
    Vq(Codebook),
    Dl { dictionary: Dictionary, sparsity: usize, geometry: PatchGeometry },
}

/// Per-unit side information produced by the bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub enum BottleneckAux {
    None,
    Assignment(Assignment),
    Code(SparseCode),
}

/// Coding units together with their compressed reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct CodedUnits {
    pub units: SignalMatrix,
    pub recon: SignalMatrix,
    pub aux: BottleneckAux,
    pub usage: UsageHistogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckOutput {
    pub zhat: LatentTensor,
    pub aux: BottleneckAux,
    pub codebook_term: f64,
    pub commitment_term: f64,
    pub usage_histogram: UsageHistogram,
}

impl Bottleneck {
    pub fn kind(&self) -> BottleneckKind {
        match self {
            Bottleneck::Identity => BottleneckKind::Identity,
            Bottleneck::Vq(_) => BottleneckKind::Vq,
            Bottleneck::Dl { .. } => BottleneckKind::Dl,
        }
    }

    /// VQ always codes fibers.
    pub fn geometry(&self) -> PatchGeometry {
        match self {
            Bottleneck::Dl { geometry, .. } => *geometry,
            _ => PatchGeometry::fiber(),
        }
    }

    /// Atom/codeword count, zero for the identity.
    pub fn atoms(&self) -> usize {
        match self {
            Bottleneck::Identity => 0,
            Bottleneck::Vq(cb) => cb.k(),
            Bottleneck::Dl { dictionary, .. } => dictionary.k(),
        }
    }

    pub fn dictionary(&self) -> Option<&Dictionary> {
        match self {
            Bottleneck::Identity => None,
            Bottleneck::Vq(cb) => Some(cb.embeddings()),
            Bottleneck::Dl { dictionary, .. } => Some(dictionary),
        }
    }

    /// Compresses already-unfolded coding units.
    pub fn code_units(&self, units: &SignalMatrix) -> Result<CodedUnits> {
        match self {
            Bottleneck::Identity => Ok(CodedUnits {
                units: units.clone(),
                recon: units.clone(),
                aux: BottleneckAux::None,
                usage: UsageHistogram::new(0),
            }),
            Bottleneck::Vq(cb) => {
                let a = assign(units, cb)?;
                let recon = one_hot_reconstruct(&a, cb)?;
                let usage = a.usage(cb.k());
                Ok(CodedUnits { units: units.clone(), recon, aux: BottleneckAux::Assignment(a), usage })
            }
            Bottleneck::Dl { dictionary, sparsity, .. } => {
                let code = batch_omp(units, dictionary, *sparsity)?;
                let recon = reconstruct(&code, dictionary)?;
                let usage = UsageHistogram::from_counts(code.usage_counts());
                Ok(CodedUnits { units: units.clone(), recon, aux: BottleneckAux::Code(code), usage })
            }
        }
    }

    /// Bottleneck on a single latent tensor.
    pub fn forward(&self, z_e: &LatentTensor) -> Result<BottleneckOutput> {
        let geometry = self.geometry();
        let units = unfold(z_e, &geometry)?;
        let coded = self.code_units(&units)?;
        let (h, w, l) = z_e.shape();
        let zhat = fold(&coded.recon, &geometry, h, w, l)?;
        let (codebook_term, commitment_term) = match self {
            Bottleneck::Identity => (0.0, 0.0),
            _ => {
                let losses = vq_losses(&units, &coded.recon)?;
                (losses.codebook_term, losses.commitment_term)
            }
        };
        Ok(BottleneckOutput {
            zhat,
            aux: coded.aux,
            codebook_term,
            commitment_term,
            usage_histogram: coded.usage,
        })
    }

    /// Bottleneck on a batch stored one latent per column. Returns the
    /// compressed latents in the same layout plus the coded units.
    pub fn forward_batch(&self, z: &SignalMatrix, shape: LatentShape) -> Result<(SignalMatrix, CodedUnits)> {
        let geometry = self.geometry();
        let units = unfold_batch(z, shape, &geometry)?;
        let coded = self.code_units(&units)?;
        let zhat = fold_batch(&coded.recon, shape, &geometry)?;
        Ok((zhat, coded))
    }
}

/// Free-function form of [`Bottleneck::forward`].
pub fn forward(z_e: &LatentTensor, bottleneck: &Bottleneck) -> Result<BottleneckOutput> {
    bottleneck.forward(z_e)
}

/// `z_e + sg[zhat - z_e]`. The forward value is exactly `zhat`; in the
/// backward pass the incoming gradient is passed to `z_e` unchanged
/// (see [`straight_through_backward`]).
pub fn straight_through(z_e: &LatentTensor, zhat: &LatentTensor) -> Result<LatentTensor> {
    if z_e.shape() != zhat.shape() {
        return Err(Error::DimensionMismatch(format!(
            "straight-through shapes differ: {:?} vs {:?}",
            z_e.shape(),
            zhat.shape()
        )));
    }
    Ok(zhat.clone())
}

/// Gradient with respect to `z_e` of a loss downstream of
/// [`straight_through`]: the identity.
pub fn straight_through_backward(upstream: &[f64]) -> Vec<f64> {
    upstream.to_vec()
}

/// `recon + codebook + beta * commitment`.
pub fn dl_objective(recon_loss: f64, codebook_term: f64, commitment_term: f64, beta: f64) -> f64 {
    debug_assert!(beta >= 0.0);
    recon_loss + codebook_term + beta * commitment_term
}
