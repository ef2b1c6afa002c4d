use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{ModelConfig, QuantizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Steps between held-out metric rows; 0 means only at the end.
    pub eval_interval: u64,
    /// Steps between checkpoints; 0 means only at the end.
    pub checkpoint_interval: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: 1.0,
            eval_interval: 250,
            checkpoint_interval: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Procedural shapes rendered from `data.seed`.
    Shapes,
    /// A directory with `labels.csv` and PPM images.
    Dir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub seed: u64,
    pub count: usize,
    pub num_classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Shapes,
            path: None,
            seed: 0,
            count: 8000,
            num_classes: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub quantizer: QuantizerConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub data: DataConfig,
}

const SECTIONS: [&str; 5] = ["model", "quantizer", "loss", "optim", "data"];

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::with_overrides(text, &[])
    }

    /// Parses `text` after applying `section.key=value` overrides. Values
    /// are read as TOML literals, falling back to plain strings.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.trim_start_matches("--");
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let (section, key) = path.split_once('.').ok_or_else(|| {
                Error::Config(format!("override key {path:?} is not section.key"))
            })?;
            if !SECTIONS.contains(&section) {
                return Err(Error::Config(format!(
                    "unknown config section {section:?} (sections: {})",
                    SECTIONS.join(", ")
                )));
            }
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(sec) = entry else {
                return Err(Error::Config(format!("{section} is not a table")));
            };
            sec.insert(key.to_string(), value);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn fingerprint(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.quantizer.validate(self.model.code_dim())?;
        self.loss.validate()?;
        let o = &self.optim;
        if o.steps == 0 {
            return Err(Error::Config("optim.steps must be >= 1".into()));
        }
        if o.batch_size == 0 || (self.loss.lambda_contra > 0.0 && o.batch_size < 2) {
            return Err(Error::Config(
                "optim.batch_size must be >= 1, and >= 2 with a contrastive term".into(),
            ));
        }
        let rates_ok = o.learning_rate.is_finite()
            && o.learning_rate >= 0.0
            && (0.0..1.0).contains(&o.beta1)
            && (0.0..1.0).contains(&o.beta2)
            && o.eps > 0.0
            && o.grad_clip >= 0.0;
        if !rates_ok {
            return Err(Error::Config(
                "optim: learning_rate >= 0, beta1/beta2 in [0, 1), eps > 0, grad_clip >= 0".into(),
            ));
        }
        if self.data.source == DataSource::Dir && self.data.path.is_none() {
            return Err(Error::Config(
                "data.source = \"dir\" needs data.path".into(),
            ));
        }
        if self.data.source == DataSource::Shapes && !(2..=16).contains(&self.data.num_classes) {
            return Err(Error::Config("data.num_classes must lie in [2, 16]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let c = TrainConfig::from_toml("").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!(c.loss.lambda_contra, 1.0);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(TrainConfig::from_toml("[model]\nwidht = 3\n").is_err());
        assert!(TrainConfig::from_toml("[modle]\nwidth = 3\n").is_err());
        assert!(TrainConfig::with_overrides("", &["--optim.stpes=3".into()]).is_err());
    }

    #[test]
    fn overrides_apply() {
        let c = TrainConfig::with_overrides(
            "[optim]\nsteps = 10\n",
            &[
                "--optim.steps=20".into(),
                "model.factorization=linear".into(),
                "--loss.lambda_vq=0.5".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.optim.steps, 20);
        assert_eq!(c.model.factorization, crate::model::Factorization::Linear);
        assert_eq!(c.loss.lambda_vq, 0.5);
    }

    #[test]
    fn toml_round_trip_and_fingerprint() {
        let mut c = TrainConfig::default();
        c.optim.learning_rate = 1.234e-3;
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.fingerprint(), c.fingerprint());
        assert_ne!(TrainConfig::default().fingerprint(), c.fingerprint());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(TrainConfig::with_overrides("", &["optim.steps=0".into()]).is_err());
        assert!(TrainConfig::with_overrides("", &["optim.batch_size=1".into()]).is_err());
        assert!(TrainConfig::with_overrides("", &["model.latent_dim=15".into()]).is_err());
    }
}
