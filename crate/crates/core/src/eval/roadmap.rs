use std::fmt;

use serde::{Deserialize, Serialize};

use super::measure;
use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::model::{Factorization, QuantizerConfig, QuantizerKind, SupervisionPoint};
use crate::par::Execution;
use crate::train::{TrainConfig, Trainer};

pub const ROADMAP_HEADER: [&str; 4] = ["stage", "seed", "zs_accuracy", "psnr"];

/// Variants trained by [`roadmap_ablation`], in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Contrastive loss only, no factorization, no quantizer.
    Contrastive,
    /// Adds the linear down/up projection.
    LinearFactorized,
    /// Linear projection plus MCQ.
    Discretized,
    /// Discretized plus the reconstruction loss.
    JointRecon,
    /// Contrastive only with the attention projection instead of the
    /// linear one.
    AttentionFactorized,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Contrastive,
        Stage::LinearFactorized,
        Stage::Discretized,
        Stage::JointRecon,
        Stage::AttentionFactorized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Contrastive => "contrastive",
            Stage::LinearFactorized => "linear_factorized",
            Stage::Discretized => "discretized",
            Stage::JointRecon => "joint_recon",
            Stage::AttentionFactorized => "attention_factorized",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `base` rewired for `stage`. The contrastive embedding is always pooled
/// after quantization and expansion, so factorization and discretization
/// sit on the path the alignment loss sees.
pub fn stage_config(base: &TrainConfig, stage: Stage, seed: u64) -> TrainConfig {
    let mut c = base.clone();
    c.optim.seed = seed;
    c.model.supervision = SupervisionPoint::PostQuantization;
    c.loss.lambda_contra = 1.0;
    c.loss.lambda_recon = 0.0;
    let mcq = QuantizerConfig {
        scheme: QuantizerKind::Mcq,
        ..base.quantizer.clone()
    };
    let (factorization, quantizer, recon) = match stage {
        Stage::Contrastive => (Factorization::None, QuantizerConfig::disabled(), false),
        Stage::LinearFactorized => (Factorization::Linear, QuantizerConfig::disabled(), false),
        Stage::Discretized => (Factorization::Linear, mcq, false),
        Stage::JointRecon => (Factorization::Linear, mcq, true),
        Stage::AttentionFactorized => {
            (Factorization::Attention, QuantizerConfig::disabled(), false)
        }
    };
    c.model.factorization = factorization;
    c.quantizer = quantizer;
    if recon {
        c.loss.lambda_recon = 1.0;
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadmapRow {
    pub stage: Stage,
    pub seed: u64,
    pub zs_accuracy: f64,
    /// Only for stages with a reconstruction loss.
    pub psnr: Option<f64>,
}

/// Trains every stage for every seed on `ds` and measures the held-out
/// split. Runs are independent and may execute in parallel.
pub fn roadmap_ablation(
    base: &TrainConfig,
    ds: &LabeledDataset,
    stages: &[Stage],
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<RoadmapRow>> {
    let held = ds.indices(Split::HeldOut);
    if held.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let jobs: Vec<(Stage, u64)> = stages
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    exec.map(&jobs, |&(stage, seed)| -> Result<RoadmapRow> {
        let cfg = stage_config(base, stage, seed);
        let recon = cfg.loss.lambda_recon > 0.0;
        let mut t = Trainer::new(cfg, ds.num_classes())?.with_execution(Execution::Sequential);
        let steps = t.config().optim.steps;
        t.run_until(ds, steps, |_| Ok(()))?;
        let m = measure(t.model(), ds, &held, recon, Execution::Sequential)?;
        log::info!("roadmap {stage} seed {seed}: zs {:.4}", m.zs_accuracy);
        Ok(RoadmapRow {
            stage,
            seed,
            zs_accuracy: m.zs_accuracy,
            psnr: m.psnr,
        })
    })
    .into_iter()
    .collect()
}

/// Mean held-out accuracy of `stage` over the rows present.
pub fn mean_accuracy(rows: &[RoadmapRow], stage: Stage) -> Option<f64> {
    let xs: Vec<f64> = rows
        .iter()
        .filter(|r| r.stage == stage)
        .map(|r| r.zs_accuracy)
        .collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn roadmap_csv(rows: &[RoadmapRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(ROADMAP_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
