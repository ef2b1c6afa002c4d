//! Reconstruction, vector-quantization and contrastive loss terms.
//!
//! Only the pixel reconstruction and VQ terms of the reconstruction
//! objective exist here; there is no perceptual or adversarial term.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Weights of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the pixel reconstruction term (1 unless the run is
    /// contrastive-only).
    pub lambda_recon: f64,
    pub lambda_vq: f64,
    pub lambda_contra: f64,
    /// Commitment coefficient.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_recon: 1.0,
            lambda_vq: 1.0,
            lambda_contra: 1.0,
            beta: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_recon", self.lambda_recon),
            ("lambda_vq", self.lambda_vq),
            ("lambda_contra", self.lambda_contra),
            ("beta", self.beta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "loss.{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms plus their weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon: f64,
    pub vq: f64,
    pub contrastive: f64,
    pub total: f64,
    /// VQ term restricted to each sub-codebook's chunk (or RQ level).
    pub vq_per_codebook: Vec<f64>,
}

impl LossReport {
    /// Combines unweighted terms. A non-finite term is a divergence.
    pub fn compose(
        recon: f64,
        vq: f64,
        contrastive: f64,
        vq_per_codebook: Vec<f64>,
        weights: &LossWeights,
    ) -> Result<Self> {
        let total = weights.lambda_recon * recon
            + weights.lambda_vq * vq
            + weights.lambda_contra * contrastive;
        let report = Self {
            recon,
            vq,
            contrastive,
            total,
            vq_per_codebook,
        };
        if [recon, vq, contrastive, total]
            .iter()
            .all(|v| v.is_finite())
        {
            Ok(report)
        } else {
            Err(Error::Divergence {
                step: 0,
                report: Box::new(report),
                last_good: None,
            })
        }
    }
}

/// Mean squared error over every element.
pub fn recon_loss<T: Real>(tape: &mut Tape<T>, x: Var, x_hat: Var) -> Result<Var> {
    let diff = tape.sub(x_hat, x)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Mean over tokens of `||sg[f] - f̂||² + β·||f - sg[f̂]||²`.
///
/// With `codebook_term = false` (EMA-maintained codebooks) only the
/// commitment part is built. `f` and `f_hat` are `[tokens, d]`.
pub fn vq_loss<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    f_hat: Var,
    beta: f64,
    codebook_term: bool,
) -> Result<Var> {
    if tape.shape(f) != tape.shape(f_hat) {
        return Err(Error::ShapeMismatch {
            op: "vq_loss",
            detail: format!("{:?} vs {:?}", tape.shape(f), tape.shape(f_hat)),
        });
    }
    let tokens = tape.value(f).rows();
    let inv = T::one() / T::from_f64(tokens as f64);
    let f_hat_sg = tape.detach(f_hat);
    let commit_diff = tape.sub(f, f_hat_sg)?;
    let commit_sq = tape.mul(commit_diff, commit_diff)?;
    let commit = tape.sum(commit_sq);
    let commit = tape.scale(commit, T::from_f64(beta) * inv);
    if !codebook_term {
        return Ok(commit);
    }
    let f_sg = tape.detach(f);
    let cb_diff = tape.sub(f_sg, f_hat)?;
    let cb_sq = tape.mul(cb_diff, cb_diff)?;
    let cb = tape.sum(cb_sq);
    let cb = tape.scale(cb, inv);
    tape.add(cb, commit)
}

/// Symmetric cross-entropy over a `[batch, classes]` logit matrix.
///
/// The row direction classifies each image among all classes. The column
/// direction, for every class present in the batch, classifies which batch
/// items carry it, with the target spread evenly over those items.
pub fn contrastive_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[usize],
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || targets.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "contrastive_loss",
            detail: format!("logits {shape:?} for {} targets", targets.len()),
        });
    }
    let (batch, classes) = (shape[0], shape[1]);
    if let Some(&id) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::UnknownClass {
            id,
            num_classes: classes,
        });
    }
    let mut row_t = Tensor::<T>::zeros(&[batch, classes]);
    for (r, &t) in targets.iter().enumerate() {
        row_t.data_mut()[r * classes + t] = T::one();
    }
    let row_loss = tape.cross_entropy(logits, row_t)?;

    let mut present: Vec<usize> = targets.to_vec();
    present.sort_unstable();
    present.dedup();
    let transposed = tape.transpose(logits)?;
    let cols = tape.gather_rows(transposed, &present)?;
    let mut col_t = Tensor::<T>::zeros(&[present.len(), batch]);
    for (p, &c) in present.iter().enumerate() {
        let members = targets.iter().filter(|&&t| t == c).count();
        let share = T::one() / T::from_f64(members as f64);
        for (r, &t) in targets.iter().enumerate() {
            if t == c {
                col_t.data_mut()[p * batch + r] = share;
            }
        }
    }
    let col_loss = tape.cross_entropy(cols, col_t)?;
    let both = tape.add(row_loss, col_loss)?;
    Ok(tape.scale(both, T::from_f64(0.5)))
}
