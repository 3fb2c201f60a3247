//! Effective run configuration: defaults, JSON config file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use recess_core::evolve::HyperParams;
use recess_core::model::{Mode, ModelConfig};
use recess_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::errors::UserError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub manifest: PathBuf,
    pub folds: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Genome applied on top of `model` and `train` when the run starts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperparams: Option<HyperParams>,
    pub fold: usize,
    pub train_ratio: f64,
    pub split_seed: u64,
    pub model_seed: u64,
    pub paths: Paths,
}

impl RunConfig {
    pub fn defaults(mode: Mode) -> Self {
        Self {
            mode,
            model: ModelConfig::tiny(mode),
            train: TrainConfig::for_mode(mode),
            hyperparams: None,
            fold: 0,
            train_ratio: 0.8,
            split_seed: 0,
            model_seed: 0,
            paths: Paths {
                manifest: PathBuf::from("manifest.jsonl"),
                folds: PathBuf::from("folds.json"),
                out: PathBuf::from("run"),
            },
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| UserError(format!("config {}: {e}", path.display())).into())
    }

    /// Model and training configuration with the genome applied.
    pub fn effective(&self) -> (ModelConfig, TrainConfig) {
        let mut model = self.model.clone();
        let mut train = self.train.clone();
        if let Some(h) = &self.hyperparams {
            h.apply(&mut train, &mut model);
        }
        (model, train)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.model.mode != self.mode {
            bail!(UserError(format!(
                "config mode {:?} does not match model mode {:?}",
                self.mode, self.model.mode
            )));
        }
        let (model, train) = self.effective();
        model.validate().map_err(|e| UserError(e.to_string()))?;
        train.validate().map_err(|e| UserError(e.to_string()))?;
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            bail!(UserError("train_ratio must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Fails with a user error unless every path exists.
pub fn require_paths<'a>(paths: impl IntoIterator<Item = &'a Path>) -> anyhow::Result<()> {
    for p in paths {
        if !p.exists() {
            bail!(UserError(format!("{} does not exist", p.display())));
        }
    }
    Ok(())
}
