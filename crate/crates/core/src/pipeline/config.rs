//! Run configuration: one strict JSON document for every command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{AugmentConfig, SynthConfig};
use crate::encoding::EncoderConfig;
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::losses::LossConfig;
use crate::network::ModelConfig;
use crate::tensor::SgdConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub clip: f64,
    pub iterations: usize,
    /// Iteration after which the learning rate is multiplied by `lr_drop_factor`.
    pub lr_drop_at: usize,
    pub lr_drop_factor: f64,
    /// Linear ramp from `lr / warmup_iters` to `lr` over the first iterations.
    pub warmup_iters: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip: 10.0,
            iterations: 8000,
            lr_drop_at: 6400,
            lr_drop_factor: 0.1,
            warmup_iters: 100,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("optimizer.{key}"), msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(self.clip > 0.0) {
            return bad("clip", "must be positive");
        }
        if self.iterations == 0 {
            return bad("iterations", "must be positive");
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return bad("lr_drop_factor", "must lie in (0, 1]");
        }
        Ok(())
    }

    /// Learning rate used for iteration `iter` (1-based).
    pub fn lr_at(&self, iter: usize) -> f64 {
        let mut lr = self.lr;
        if iter <= self.warmup_iters {
            lr *= iter as f64 / self.warmup_iters as f64;
        }
        if iter > self.lr_drop_at {
            lr *= self.lr_drop_factor;
        }
        lr
    }

    pub fn sgd(&self, iter: usize) -> SgdConfig {
        SgdConfig {
            lr: self.lr_at(iter),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            clip: self.clip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub inference: InferenceConfig,
    /// Generator settings for `gen-data`.
    pub synth: SynthConfig,
    pub batch_size: usize,
    /// Training dataset directory.
    pub dataset: PathBuf,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            augment: AugmentConfig::default(),
            inference: InferenceConfig::default(),
            synth: SynthConfig::default(),
            batch_size: 8,
            dataset: PathBuf::from("data/train"),
            seed: 7,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 1000,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.encoder.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.augment.validate()?;
        self.inference.validate()?;
        self.synth.validate()?;
        if self.encoder.num_classes != self.model.num_classes {
            return Err(Error::config("encoder.num_classes", "must equal model.num_classes"));
        }
        if (self.synth.width, self.synth.height) != (self.model.input_w, self.model.input_h) {
            return Err(Error::config("synth.width", "generated image size must equal the model input size"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path.is_empty() { ".".to_string() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
