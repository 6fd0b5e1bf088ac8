use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::LabelMode;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{BackboneConfig, HeadConfig};
use crate::ssl::SslSpec;

/// Whether the ambiguity/overclustering losses are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The plain SSL algorithm; evaluation treats every image as certain.
    Vanilla,
    #[default]
    Dc3,
}

/// Head sizes; `k` always comes from the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSettings {
    /// Defaults to `3k`.
    pub k_prime: Option<usize>,
    pub embedding_dim: usize,
}

impl Default for HeadSettings {
    fn default() -> Self {
        HeadSettings {
            k_prime: None,
            embedding_dim: 128,
        }
    }
}

impl HeadSettings {
    pub fn resolve(&self, k: usize) -> HeadConfig {
        HeadConfig {
            k,
            k_prime: self.k_prime.unwrap_or(3 * k),
            embedding_dim: self.embedding_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    #[default]
    SgdMomentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub name: OptimizerName,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Half-cosine decay of the learning rate to zero over the run.
    pub cosine_decay: bool,
    /// Rescales the full gradient to at most this L2 norm.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            name: OptimizerName::SgdMomentum,
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            cosine_decay: true,
            max_grad_norm: Some(5.0),
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if !self.cosine_decay || total == 0 {
            return self.lr;
        }
        let t = step as f64 / total as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// The fixed augmentation list: horizontal flip, integer translation and
/// additive brightness jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    /// Maximum shift as a fraction of the side length.
    pub translate: f64,
    /// Maximum absolute brightness offset.
    pub brightness: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip: true,
            translate: 0.1,
            brightness: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flip: false,
            translate: 0.0,
            brightness: 0.0,
        }
    }
}

/// A complete training run. Every section has defaults, so a config file
/// only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Relative paths resolve against the config file's directory.
    pub manifest: PathBuf,
    pub method: Method,
    pub ssl: SslSpec,
    pub head: HeadSettings,
    pub backbone: BackboneConfig,
    pub loss: LossWeights,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Overrides the manifest's label mode.
    pub label_mode: Option<LabelMode>,
    /// When set, the manifest is re-split before training.
    pub supervised_fraction: Option<f64>,
    pub val_fraction: f64,
    pub split_seed: u64,
    /// Evaluate on the validation split every n steps; 0 evaluates only at
    /// the end.
    pub eval_every: usize,
    pub log_every: usize,
    /// Save a checkpoint every n steps; the final step is always saved.
    pub checkpoint_every: usize,
    pub augment: AugmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: PathBuf::from("manifest.json"),
            method: Method::Dc3,
            ssl: SslSpec::default(),
            head: HeadSettings::default(),
            backbone: BackboneConfig::default(),
            loss: LossWeights::default(),
            batch_size: 64,
            steps: 1000,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            label_mode: None,
            supervised_fraction: None,
            val_fraction: 0.2,
            split_seed: 0,
            eval_every: 0,
            log_every: 1,
            checkpoint_every: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1");
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad("optimizer.lr must be positive");
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return bad("optimizer.momentum must be in [0, 1)");
        }
        if o.weight_decay < 0.0 {
            return bad("optimizer.weight_decay must be >= 0");
        }
        if o.max_grad_norm.is_some_and(|n| n.is_nan() || n <= 0.0) {
            return bad("optimizer.max_grad_norm must be positive");
        }
        if !(0.0..0.5).contains(&self.augment.translate) || self.augment.brightness < 0.0 {
            return bad("augment.translate must be in [0, 0.5) and brightness >= 0");
        }
        if let Some(k_prime) = self.head.k_prime {
            if k_prime < 2 {
                return bad("head.k_prime must be > k");
            }
        }
        if self.head.embedding_dim == 0 {
            return bad("head.embedding_dim must be >= 1");
        }
        self.ssl.validate()?;
        self.loss.validate()
    }

    /// The weights the loss actually uses: vanilla runs disable every
    /// extension term.
    pub fn effective_weights(&self) -> LossWeights {
        match self.method {
            Method::Vanilla => LossWeights::disabled(),
            Method::Dc3 => self.loss,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if cfg.manifest.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.manifest = dir.join(&cfg.manifest);
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
