//! Deterministic training loop, optimizer and checkpoints.
//!
//! Every random choice (initialization, data order, codebook fitting,
//! dead-code revival) is drawn from a named stream keyed by the config
//! seed and the step number, so a run is a pure function of its config and
//! dataset, and resuming from a checkpoint needs no RNG state.

mod checkpoint;
mod config;
mod optim;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{DataConfig, DataSource, OptimConfig, OptimizerKind, TrainConfig};
pub use optim::{clip_factor, Moments, Optimizer};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{gen_shapes, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::eval::measure;
use crate::losses::LossReport;
use crate::model::{gradients, Batch, CodebookUpdate, TokenizerModel};
use crate::par::Execution;
use crate::quantize::{fit_quantizer, io::write_atomic, KMeansConfig};
use crate::rng::{mix64, stream};

pub const METRICS_HEADER: [&str; 9] = [
    "step",
    "recon",
    "vq",
    "contrastive",
    "total",
    "perplexity",
    "utilization",
    "psnr",
    "zs_acc",
];

/// One metrics row: the training batch's losses at `step` plus held-out
/// measurements. Entries that do not apply to the configuration are empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub recon: f64,
    pub vq: f64,
    pub contrastive: f64,
    pub total: f64,
    pub perplexity: Option<f64>,
    pub utilization: Option<f64>,
    pub psnr: Option<f64>,
    pub zs_acc: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Loads or renders the dataset a config describes.
pub fn load_dataset(cfg: &DataConfig) -> Result<LabeledDataset> {
    match cfg.source {
        DataSource::Shapes => gen_shapes(cfg.seed, cfg.count, cfg.num_classes),
        DataSource::Dir => {
            let path = cfg
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("data.path is required for dir datasets".into()))?;
            LabeledDataset::load_dir(path)
        }
    }
}

/// Dataset positions used at `step`: consecutive slices of per-epoch
/// shuffles of `train`, wrapping across epoch boundaries.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, train: &[usize]) -> Vec<usize> {
    let n = train.len() as u64;
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for b in 0..batch_size as u64 {
        let pos = step * batch_size as u64 + b;
        let epoch = pos / n;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm = train.to_vec();
            perm.shuffle(&mut stream(seed, "shuffle", epoch));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("filled").1[(pos % n) as usize]);
    }
    out
}

/// Live training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    config: TrainConfig,
    model: TokenizerModel,
    optimizer: Optimizer,
    step: u64,
    history: Vec<MetricsRow>,
    exec: Execution,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let model = TokenizerModel::new(
            config.model.clone(),
            config.quantizer.clone(),
            num_classes,
            config.optim.seed,
        )?;
        Ok(Self {
            optimizer: Optimizer::new(config.optim.optimizer),
            config,
            model,
            step: 0,
            history: Vec::new(),
            exec: Execution::default(),
            last_checkpoint: None,
        })
    }

    /// Execution mode for quantizer lookups and held-out evaluation. The
    /// results do not depend on it.
    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &TokenizerModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut TokenizerModel {
        &mut self.model
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[MetricsRow] {
        &self.history
    }

    /// Changes the step budget; it may not fall below the steps taken.
    pub fn extend_to(&mut self, steps: u64) -> Result<()> {
        if steps < self.step {
            return Err(Error::Config(format!(
                "optim.steps {steps} is below the {} steps already taken",
                self.step
            )));
        }
        self.config.optim.steps = steps;
        Ok(())
    }

    pub fn set_last_checkpoint(&mut self, path: Option<PathBuf>) {
        self.last_checkpoint = path;
    }

    /// Rebuilds a trainer from its persisted parts.
    pub fn from_parts(
        config: TrainConfig,
        model: TokenizerModel,
        optimizer: Optimizer,
        step: u64,
        history: Vec<MetricsRow>,
    ) -> Self {
        Self {
            config,
            model,
            optimizer,
            step,
            history,
            exec: Execution::default(),
            last_checkpoint: None,
        }
    }

    fn init_codebooks(&mut self, batch: &Batch) -> Result<()> {
        let Some(spec) = self.config.quantizer.spec() else {
            return Ok(());
        };
        let inf = self.model.infer(batch, false, false, self.exec)?;
        let seed = mix64(self.config.optim.seed ^ 0x6b6d_6561_6e73);
        let kcfg = KMeansConfig::new(spec.k, seed);
        match fit_quantizer(
            self.exec,
            &inf.latents,
            self.model.config().code_dim(),
            &spec,
            &kcfg,
        ) {
            Ok(q) => self.model.set_quantizer(q),
            Err(Error::InsufficientData { needed, got }) => {
                log::warn!("first batch has {got} latents, k-means needs {needed}; keeping random codebooks");
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    /// One forward/backward/update on the batch `indices` of `ds`.
    pub fn train_step(&mut self, ds: &LabeledDataset, indices: &[usize]) -> Result<LossReport> {
        let batch = Batch::from_dataset(ds, indices, self.config.model.patch_size)?;
        if self.step == 0 && self.config.quantizer.kmeans_init {
            self.init_codebooks(&batch)?;
        }
        let mut tape = Tape::<f32>::new();
        let pass = self
            .model
            .forward(
                self.model.params(),
                &mut tape,
                &batch,
                &self.config.loss,
                self.exec,
            )
            .map_err(|e| match e {
                Error::Divergence { report, .. } => Error::Divergence {
                    step: self.step,
                    report,
                    last_good: self.last_checkpoint.clone(),
                },
                other => other,
            })?;
        tape.backward(pass.loss)?;
        let grads = gradients(&tape, &pass.bound);
        let latents = tape.value(pass.latents).data().to_vec();
        drop(tape);

        let (_, factor) = clip_factor(
            grads.values().map(|g| g.data()),
            self.config.optim.grad_clip,
        );
        let ocfg = &self.config.optim;
        self.optimizer.begin_step();
        let mut scaled = Vec::new();
        for (name, g) in &grads {
            scaled.clear();
            scaled.extend(g.data().iter().map(|&x| x * factor));
            if let Some(slot) = name.strip_prefix("codebook.") {
                let i: usize = slot.parse().expect("codebook slot");
                let q = self
                    .model
                    .quantizer_mut()
                    .expect("codebooks imply a quantizer");
                self.optimizer
                    .apply(ocfg, name, q.codebooks_mut()[i].entries_mut(), &scaled);
            } else {
                let p = self.model.params_mut().get_mut(name)?;
                self.optimizer.apply(ocfg, name, p.data_mut(), &scaled);
            }
        }
        self.model.clamp_temperature();

        let qcfg = self.config.quantizer.clone();
        let step = self.step + 1;
        if let Some(q) = self.model.quantizer_mut() {
            for code in &pass.codes {
                q.record(&code.indices);
            }
            if qcfg.update == CodebookUpdate::Ema {
                let assignments = q.assignments(&latents, &pass.codes);
                for (cb, a) in q.codebooks_mut().iter_mut().zip(&assignments) {
                    cb.ema_update(a, qcfg.ema_decay as f32)?;
                }
                if qcfg.revival_interval > 0 && step % qcfg.revival_interval == 0 {
                    let inputs = q.codebook_inputs(&latents, &pass.codes);
                    for (i, (cb, (vectors, _))) in
                        q.codebooks_mut().iter_mut().zip(inputs).enumerate()
                    {
                        let mut rng =
                            stream(self.config.optim.seed, "revive", step * 1024 + i as u64);
                        cb.revive_dead_codes(&vectors, qcfg.revival_threshold as f32, &mut rng)?;
                    }
                }
            }
        }
        self.step = step;
        Ok(pass.report)
    }

    /// The training indices of `ds` (the 90% split).
    pub fn train_indices(ds: &LabeledDataset) -> Vec<usize> {
        ds.indices(Split::Train)
    }

    /// Measures held-out metrics and appends a row for the current step.
    pub fn record_metrics(
        &mut self,
        ds: &LabeledDataset,
        report: &LossReport,
    ) -> Result<&MetricsRow> {
        let held = ds.indices(Split::HeldOut);
        let reconstruct = self.config.loss.lambda_recon > 0.0;
        let m = measure(&self.model, ds, &held, reconstruct, self.exec)?;
        let usage = m.mean_usage();
        let tower = self.config.loss.lambda_contra > 0.0;
        self.history.push(MetricsRow {
            step: self.step,
            recon: report.recon,
            vq: report.vq,
            contrastive: report.contrastive,
            total: report.total,
            perplexity: usage.map(|u| u.1),
            utilization: usage.map(|u| u.0),
            psnr: m.psnr,
            zs_acc: tower.then_some(m.zs_accuracy),
        });
        Ok(self.history.last().expect("pushed"))
    }

    /// Trains until `until` steps have been taken, calling `on_step` after
    /// every step. Metric rows are recorded every `eval_interval` steps and
    /// at `optim.steps`.
    pub fn run_until(
        &mut self,
        ds: &LabeledDataset,
        until: u64,
        mut on_step: impl FnMut(&mut Self) -> Result<()>,
    ) -> Result<()> {
        if ds.num_classes() != self.model.num_classes() {
            return Err(Error::Config(format!(
                "dataset has {} classes, model expects {}",
                ds.num_classes(),
                self.model.num_classes()
            )));
        }
        let train = Self::train_indices(ds);
        if train.is_empty() {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        let (seed, bs) = (self.config.optim.seed, self.config.optim.batch_size);
        let (interval, total) = (self.config.optim.eval_interval, self.config.optim.steps);
        while self.step < until {
            let idx = batch_indices(seed, self.step, bs, &train);
            let report = self.train_step(ds, &idx)?;
            if (interval > 0 && self.step % interval == 0) || self.step == total {
                self.record_metrics(ds, &report)?;
            }
            on_step(self)?;
        }
        Ok(())
    }

    /// Trains to `optim.steps`.
    pub fn run(&mut self, ds: &LabeledDataset) -> Result<()> {
        let total = self.config.optim.steps;
        self.run_until(ds, total, |_| Ok(()))
    }
}

/// Artifacts of [`fit`].
#[derive(Debug)]
pub struct FitOutput {
    pub trainer: Trainer,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.utkc";
pub const METRICS_FILE: &str = "metrics.csv";

/// Trains from `config` (or from `resume`) into `out_dir`, writing
/// `checkpoint.utkc` every `checkpoint_interval` steps and at the end, and
/// `metrics.csv` alongside.
pub fn fit(config: TrainConfig, out_dir: &Path, resume: Option<&Path>) -> Result<FitOutput> {
    let ds = load_dataset(&config.data)?;
    let mut trainer = match resume {
        Some(p) => {
            let mut t = load_checkpoint(p)?;
            let mut same_but_steps = t.config().clone();
            same_but_steps.optim.steps = config.optim.steps;
            if same_but_steps == config {
                t.extend_to(config.optim.steps)?;
            } else {
                log::warn!("resuming with the checkpoint's own configuration");
            }
            t
        }
        None => Trainer::new(config, ds.num_classes())?,
    };
    std::fs::create_dir_all(out_dir)?;
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let metrics = out_dir.join(METRICS_FILE);
    let every = trainer.config().optim.checkpoint_interval;
    let total = trainer.config().optim.steps;
    let write = |t: &mut Trainer| -> Result<()> {
        save_checkpoint(t, &ckpt)?;
        write_atomic(&metrics, metrics_csv(t.history())?.as_bytes())?;
        t.set_last_checkpoint(Some(ckpt.clone()));
        Ok(())
    };
    trainer.run_until(&ds, total, |t| {
        if every > 0 && t.step_count() % every == 0 && t.step_count() < total {
            write(t)?;
        }
        Ok(())
    })?;
    write(&mut trainer)?;
    Ok(FitOutput {
        trainer,
        checkpoint: ckpt,
        metrics,
    })
}
