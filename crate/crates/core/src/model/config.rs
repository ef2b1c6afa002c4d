use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantize::{QuantizerSpec, Scheme};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factorization {
    /// Quantize the encoder's `width`-channel tokens directly.
    None,
    Linear,
    Attention,
}

/// Where the contrastive embedding is pooled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionPoint {
    /// Encoder tokens, before factorization.
    PreFactorization,
    /// Expanded tokens after quantization.
    PostQuantization,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Encoder/decoder channel count.
    pub width: usize,
    /// Channel count of the factorized latent.
    pub latent_dim: usize,
    pub heads: usize,
    /// Residual MLP blocks in each of encoder and decoder.
    pub mlp_blocks: usize,
    pub factorization: Factorization,
    pub supervision: SupervisionPoint,
    /// Initial contrastive temperature.
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            width: 64,
            latent_dim: 16,
            heads: 4,
            mlp_blocks: 1,
            factorization: Factorization::Attention,
            supervision: SupervisionPoint::PreFactorization,
            temperature: 0.1,
        }
    }
}

pub const MIN_TEMPERATURE: f64 = 0.01;
pub const MAX_TEMPERATURE: f64 = 100.0;

impl ModelConfig {
    pub fn tokens_per_image(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Width of the tokens the quantizer sees.
    pub fn code_dim(&self) -> usize {
        match self.factorization {
            Factorization::None => self.width,
            _ => self.latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "model.patch_size {} must divide model.image_size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.width == 0 || self.latent_dim == 0 || self.heads == 0 {
            return bad("model.width, model.latent_dim and model.heads must be positive".into());
        }
        if self.factorization == Factorization::Attention
            && self.width != self.heads * self.latent_dim
        {
            return bad(format!(
                "attention factorization needs width == heads * latent_dim, got {} != {} * {}",
                self.width, self.heads, self.latent_dim
            ));
        }
        if !(MIN_TEMPERATURE..=MAX_TEMPERATURE).contains(&self.temperature) {
            return bad(format!(
                "model.temperature must lie in [{MIN_TEMPERATURE}, {MAX_TEMPERATURE}]"
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantizerKind {
    None,
    Vq,
    Mcq,
    Rq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookUpdate {
    /// Exponential moving averages of assigned vectors; codebooks get no
    /// gradient.
    Ema,
    /// Codebook entries are trained by the optimizer through the VQ loss.
    Gradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    pub scheme: QuantizerKind,
    /// Sub-codebooks (MCQ) or levels (RQ).
    pub sub_codebooks: usize,
    pub codebook_size: usize,
    /// RQ: one codebook reused by every level.
    pub shared: bool,
    pub update: CodebookUpdate,
    pub ema_decay: f64,
    pub revival_threshold: f64,
    /// Steps between dead-code checks; 0 disables revival.
    pub revival_interval: u64,
    /// Fit codebooks by k-means on the first batch's latents.
    pub kmeans_init: bool,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            scheme: QuantizerKind::Mcq,
            sub_codebooks: 4,
            codebook_size: 64,
            shared: true,
            update: CodebookUpdate::Ema,
            ema_decay: 0.99,
            revival_threshold: 1.0,
            revival_interval: 100,
            kmeans_init: true,
        }
    }
}

impl QuantizerConfig {
    pub fn disabled() -> Self {
        Self {
            scheme: QuantizerKind::None,
            ..Self::default()
        }
    }

    pub fn spec(&self) -> Option<QuantizerSpec> {
        let scheme = match self.scheme {
            QuantizerKind::None => return None,
            QuantizerKind::Vq => Scheme::Vq,
            QuantizerKind::Mcq => Scheme::Mcq,
            QuantizerKind::Rq => Scheme::Rq,
        };
        Some(QuantizerSpec {
            scheme,
            n: if scheme == Scheme::Vq {
                1
            } else {
                self.sub_codebooks
            },
            k: self.codebook_size,
            shared: self.shared,
        })
    }

    pub fn validate(&self, code_dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scheme == QuantizerKind::None {
            return Ok(());
        }
        if self.sub_codebooks == 0 || self.codebook_size == 0 {
            return bad(
                "quantizer.sub_codebooks and quantizer.codebook_size must be positive".into(),
            );
        }
        if self.scheme == QuantizerKind::Mcq && code_dim % self.sub_codebooks != 0 {
            return bad(format!(
                "latent width {code_dim} is not divisible into {} sub-codebooks",
                self.sub_codebooks
            ));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!(
                "quantizer.ema_decay must lie in (0, 1), got {}",
                self.ema_decay
            ));
        }
        if !(self.revival_threshold.is_finite() && self.revival_threshold >= 0.0) {
            return bad("quantizer.revival_threshold must be finite and >= 0".into());
        }
        Ok(())
    }
}
