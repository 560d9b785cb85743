//! Run configuration shared by the command-line front end.
//!
//! A config file is a JSON object; every key is optional and falls back to
//! the desk-scale default below. Command-line flags override file values.
//! The resolved config is written next to every run's outputs.
//!
//! ```json
//! {
//!   "label": "s50",
//!   "model": "toy",                  // preset name, or a full ModelConfig object
//!   "vocab_size": 512,               // overrides the model's vocabulary size
//!   "context": 64,                   // overrides the model's context window
//!   "sparsity": 0.5,                 // uniform level over the sparsifiable matrices
//!   "sparsity_levels": {"layers.0.wq": 0.75},  // per-path levels (replaces "sparsity")
//!   "seed": 0,
//!   "steps": 500, "batch_size": 8, "grad_accum": 1,
//!   "peak_lr": 0.003, "warmup_fraction": 0.1, "min_lr_fraction": 0.1,
//!   "clip_norm": null,
//!   "msl": 32, "val_fraction": 0.03,
//!   "corpus": "corpus.jsonl", "vocab": "vocab.txt",
//!   "out_dir": "runs/s50",
//!   "checkpoint_every": null, "log_every": 50
//! }
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::ModelConfig;
use crate::sparsity::SparsityPlan;
use crate::training::{AdamWConfig, PretrainConfig, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Explicit(ModelConfig),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig> {
        match self {
            ModelSpec::Preset(name) => ModelConfig::preset(name).ok_or_else(|| {
                Error::contract(format!(
                    "unknown model preset {name:?} (expected one of {:?})",
                    ModelConfig::PRESETS
                ))
            }),
            ModelSpec::Explicit(c) => Ok(c.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub label: String,
    pub model: ModelSpec,
    pub vocab_size: Option<usize>,
    pub context: Option<usize>,
    pub sparsity: f64,
    pub sparsity_levels: Option<BTreeMap<String, f64>>,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub min_lr_fraction: f64,
    pub clip_norm: Option<f64>,
    pub optimizer: AdamWConfig,
    pub msl: usize,
    pub val_fraction: f64,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint_every: Option<u64>,
    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            label: "run".into(),
            model: ModelSpec::Preset("toy".into()),
            vocab_size: None,
            context: None,
            sparsity: 0.0,
            sparsity_levels: None,
            seed: 0,
            steps: 500,
            batch_size: 8,
            grad_accum: 1,
            peak_lr: 3e-3,
            warmup_fraction: 0.1,
            min_lr_fraction: 0.1,
            clip_norm: None,
            optimizer: AdamWConfig::default(),
            msl: 32,
            val_fraction: crate::data::pack::DEFAULT_VAL_FRACTION,
            corpus: None,
            vocab: None,
            out_dir: PathBuf::from("run"),
            checkpoint_every: None,
            log_every: 50,
        }
    }
}

impl RunConfig {
    /// Full-scale pre-training hyperparameters for a preset: 200,000 steps of
    /// 512 sequences of 1024 tokens, peak learning rate 2e-4.
    pub fn full_scale(preset: &str) -> Self {
        RunConfig {
            model: ModelSpec::Preset(preset.into()),
            steps: 200_000,
            batch_size: 512,
            peak_lr: Schedule::PEAK_LR,
            msl: 1024,
            ..Default::default()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("run config", format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes `config.json` into `dir`.
    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        std::fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Model architecture after vocabulary and context overrides.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut c = self.model.resolve()?;
        if let Some(v) = self.vocab_size {
            c.vocab_size = v;
        }
        if let Some(k) = self.context {
            c.context = k;
        }
        c.validate()?;
        Ok(c)
    }

    /// `None` for a dense run.
    pub fn sparsity_plan(&self) -> Result<Option<SparsityPlan>> {
        if let Some(levels) = &self.sparsity_levels {
            return Ok(Some(SparsityPlan::per_path(levels.clone(), self.seed)));
        }
        ensure!(
            (0.0..1.0).contains(&self.sparsity),
            "sparsity {} outside [0, 1)",
            self.sparsity
        );
        Ok((self.sparsity > 0.0).then(|| SparsityPlan::uniform(self.sparsity, self.seed)))
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak_lr: self.peak_lr,
            warmup_fraction: self.warmup_fraction,
            total_steps: self.steps,
            min_lr_fraction: self.min_lr_fraction,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            schedule: self.schedule(),
            batch_size: self.batch_size,
            grad_accum: self.grad_accum,
            clip_norm: self.clip_norm,
            optimizer: self.optimizer,
            checkpoint_every: self.checkpoint_every,
            checkpoint_dir: self.checkpoint_every.map(|_| self.out_dir.clone()),
            log_every: self.log_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.sparsity_plan()?;
        self.schedule().validate()?;
        ensure!(self.batch_size >= 1 && self.grad_accum >= 1, "batch size and accumulation must be positive");
        ensure!(self.msl >= 2, "msl must be at least 2");
        ensure!(
            (0.0..1.0).contains(&self.val_fraction),
            "val_fraction {} outside [0, 1)",
            self.val_fraction
        );
        Ok(())
    }
}
