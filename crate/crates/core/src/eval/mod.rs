//! Reconstruction and alignment metrics, quantizer comparisons and the
//! staged factorization/discretization ablation.

mod compare;
mod roadmap;

pub use compare::{compare_csv, compare_quantizers, fit_and_measure, CompareRow, COMPARE_HEADER};
pub use roadmap::{
    mean_accuracy, roadmap_ablation, roadmap_csv, stage_config, RoadmapRow, Stage, ROADMAP_HEADER,
};

use serde::{Deserialize, Serialize};

use crate::data::{ImageTensor, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{Batch, TokenizerModel};
use crate::par::Execution;
use crate::quantize::CodebookStats;

pub const PSNR_CAP_DB: f64 = 99.0;
const MSE_FLOOR: f64 = 1e-10;
const EVAL_BATCH: usize = 64;

/// `10·log10(1/mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            detail: format!("{} vs {} values", a.len(), b.len()),
        });
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

pub fn psnr(x: &ImageTensor, x_hat: &ImageTensor) -> Result<f64> {
    if (x.height(), x.width()) != (x_hat.height(), x_hat.width()) {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            detail: format!(
                "{}x{} vs {}x{}",
                x.height(),
                x.width(),
                x_hat.height(),
                x_hat.width()
            ),
        });
    }
    Ok(psnr_from_mse(mse(x.data(), x_hat.data())?))
}

/// Aggregates over a set of images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub count: usize,
    /// Reconstruction MSE over all pixels and channels.
    pub mse: Option<f64>,
    pub psnr: Option<f64>,
    pub zs_accuracy: f64,
    /// Usage of each codebook on these images alone.
    pub codebooks: Vec<CodebookStats>,
    pub quantization_error_mean: Option<f64>,
    pub quantization_error_std: Option<f64>,
}

impl Measurement {
    /// Mean utilization and perplexity over codebooks.
    pub fn mean_usage(&self) -> Option<(f64, f64)> {
        if self.codebooks.is_empty() {
            return None;
        }
        let n = self.codebooks.len() as f64;
        Some((
            self.codebooks.iter().map(|s| s.utilization).sum::<f64>() / n,
            self.codebooks.iter().map(|s| s.perplexity).sum::<f64>() / n,
        ))
    }
}

/// Runs `model` over `indices` of `ds`. Batches are evaluated
/// independently (in parallel under [`Execution::Parallel`]) and reduced
/// in order.
pub fn measure(
    model: &TokenizerModel,
    ds: &LabeledDataset,
    indices: &[usize],
    reconstruct: bool,
    exec: Execution,
) -> Result<Measurement> {
    if indices.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let patch = model.config().patch_size;
    let chunks: Vec<&[usize]> = indices.chunks(EVAL_BATCH).collect();
    let parts = exec.map(&chunks, |idx| -> Result<_> {
        let batch = Batch::from_dataset(ds, idx, patch)?;
        let inf = model.infer(&batch, reconstruct, true, Execution::Sequential)?;
        let logits = model.class_logits(inf.embedding.as_deref().expect("requested"), idx.len())?;
        let correct = logits
            .data()
            .chunks_exact(logits.width())
            .zip(batch.labels())
            .filter(|(row, &label)| argmax(row) == label)
            .count();
        let sq = match &inf.reconstruction {
            Some(r) => Some(mse(r, batch.patches().data())? * r.len() as f64),
            None => None,
        };
        Ok((correct, sq, batch.patches().len(), inf.codes))
    });
    let mut correct = 0;
    let mut sq_total = 0.0;
    let mut values = 0usize;
    let mut errors = Vec::new();
    let q = model.quantizer();
    let mut counts: Vec<Vec<u64>> = q
        .map(|q| q.codebooks().iter().map(|c| vec![0; c.size()]).collect())
        .unwrap_or_default();
    for part in parts {
        let (c, sq, n, codes) = part?;
        correct += c;
        sq_total += sq.unwrap_or(0.0);
        values += n;
        if let Some(q) = q {
            for code in codes {
                for (j, &i) in code.indices.iter().enumerate() {
                    counts[q.slot(j)][i] += 1;
                }
                errors.push(code.error);
            }
        }
    }
    let mse = reconstruct.then(|| sq_total / values as f64);
    let (qe_mean, qe_std) = if errors.is_empty() {
        (None, None)
    } else {
        let n = errors.len() as f64;
        let m = errors.iter().sum::<f64>() / n;
        let v = errors.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / n;
        (Some(m), Some(v.sqrt()))
    };
    Ok(Measurement {
        count: indices.len(),
        mse,
        psnr: mse.map(psnr_from_mse),
        zs_accuracy: correct as f64 / indices.len() as f64,
        codebooks: counts
            .iter()
            .map(|c| CodebookStats::from_counts(c))
            .collect(),
        quantization_error_mean: qe_mean,
        quantization_error_std: qe_std,
    })
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of images whose nearest class embedding (cosine) is their
/// label.
pub fn zero_shot_accuracy(
    model: &TokenizerModel,
    ds: &LabeledDataset,
    indices: &[usize],
    exec: Execution,
) -> Result<f64> {
    Ok(measure(model, ds, indices, false, exec)?.zs_accuracy)
}

/// Evaluation summary written by the `eval` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub mse: f64,
    pub zs_accuracy: f64,
    /// Set when the contrastive term had zero weight during training, so
    /// the class embeddings were never fitted.
    pub untrained_tower: bool,
    pub codebooks: Vec<CodebookStats>,
    pub quantization_error_mean: Option<f64>,
    pub quantization_error_std: Option<f64>,
    pub count: usize,
    pub config_fingerprint: String,
    pub seed: u64,
    pub step: u64,
}

impl EvalReport {
    pub fn new(
        m: Measurement,
        untrained_tower: bool,
        fingerprint: String,
        seed: u64,
        step: u64,
    ) -> Self {
        let mse = m.mse.unwrap_or(f64::NAN);
        Self {
            psnr: psnr_from_mse(mse),
            mse,
            zs_accuracy: m.zs_accuracy,
            untrained_tower,
            codebooks: m.codebooks,
            quantization_error_mean: m.quantization_error_mean,
            quantization_error_std: m.quantization_error_std,
            count: m.count,
            config_fingerprint: fingerprint,
            seed,
            step,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
