//! Experiment configuration file: TOML with `dataset`, `model`, `train`,
//! and `eval` blocks plus a top-level seed. Every block is optional and
//! defaults sensibly; every run writes its resolved copy next to its
//! outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wildreid_core::evalkit::RerankParams;
use wildreid_core::nettower::{TowerConfig, TowerError};
use wildreid_core::trainer::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Overrides `train.seed` when set, so one knob reseeds a whole run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub dataset: DatasetBlock,
    pub model: ModelBlock,
    pub train: TrainConfig,
    pub eval: EvalBlock,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetBlock {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    /// `toy` or `reference`.
    pub backbone: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dve_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            backbone: "toy".into(),
            input_size: None,
            embed_dim: None,
            dve_dim: None,
            dropout: None,
        }
    }
}

impl ModelBlock {
    /// Materialize the backbone-specific defaults, then apply overrides.
    /// The identity count is filled in from data at train time.
    pub fn build(&self) -> Result<TowerConfig, CliError> {
        let mut cfg = match self.backbone.as_str() {
            "toy" => TowerConfig::toy(0),
            "reference" => TowerConfig::reference(0),
            other => {
                return Err(CliError::Config {
                    field: "model.backbone".into(),
                    reason: format!("unknown backbone `{other}` (expected `toy` or `reference`)"),
                })
            }
        };
        if let Some(s) = self.input_size {
            cfg.input_size = s;
        }
        if let Some(d) = self.embed_dim {
            cfg.embed_dim = d;
        }
        if let Some(d) = self.dve_dim {
            cfg.dve_dim = d;
        }
        if let Some(p) = self.dropout {
            cfg.dropout = p;
        }
        cfg.validate().map_err(|e| {
            let field = match e {
                TowerError::NotDivisibleBy8(_) => "model.input_size",
                _ => "model",
            };
            CliError::Config {
                field: field.into(),
                reason: e.to_string(),
            }
        })?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBlock {
    /// `plain` or `atrw` (per-camera splits plus their mean).
    pub protocol: String,
    pub rerank: bool,
    pub rerank_params: RerankParams,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self {
            protocol: "plain".into(),
            rerank: false,
            rerank_params: RerankParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            field: "config".into(),
            reason: format!("cannot read {}: {e}", path.display()),
        })?;
        let cfg: Self = toml::from_str(&text).map_err(|e| CliError::Config {
            // toml's message names the offending key and location
            field: format!("config ({})", path.display()),
            reason: e.message().to_string(),
        })?;
        cfg.train.validate().map_err(CliError::from)?;
        Ok(cfg)
    }

    /// Fold the top-level seed into the train block. Called once before a
    /// run; the result is what gets written as the resolved config.
    pub fn resolve(mut self) -> Self {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
        }
        self
    }

    pub fn write_resolved(&self, out_dir: &Path) -> Result<PathBuf, CliError> {
        let path = out_dir.join("resolved-config.toml");
        let text = toml::to_string_pretty(self).map_err(|e| CliError::Config {
            field: "config".into(),
            reason: format!("cannot serialize resolved config: {e}"),
        })?;
        std::fs::write(&path, text).map_err(|e| CliError::Other(anyhow::anyhow!(
            "writing {}: {e}",
            path.display()
        )))?;
        Ok(path)
    }
}
