//! Run configuration: one JSON document with `data`, `net`, `ssl`, `ttc`,
//! `eval` and `seed` sections. Missing fields take their defaults; unknown
//! fields are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MorphError, Result};
use crate::morphnet::NetConfig;
use crate::phantom_data::{AugmentConfig, PhantomConfig};
use crate::ssl_loss::LossWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub ema_momentum: f64,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    /// Fixed validation pairs drawn once from the validation eyes.
    pub val_pairs: usize,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            steps_per_epoch: 200,
            lr_min: 1e-6,
            lr_max: 1e-4,
            weight_decay: 1e-5,
            ema_momentum: 0.99,
            weights: LossWeights::default(),
            augment: AugmentConfig::default(),
            val_pairs: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtcConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Records whose gradients are accumulated per update.
    pub batch_size: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub weight_decay: f64,
    /// Fold whose test eyes are held out.
    pub fold: usize,
    pub augment: AugmentConfig,
}

impl Default for TtcConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            steps_per_epoch: 100,
            batch_size: 8,
            lr_min: 1e-5,
            lr_max: 1e-4,
            weight_decay: 1e-2,
            fold: 0,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Horizons (months) at which AUC and balanced accuracy are reported.
    pub horizons: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizons: vec![0.0, 6.0, 12.0, 18.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: PhantomConfig,
    pub net: NetConfig,
    pub ssl: SslConfig,
    pub ttc: TtcConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: PhantomConfig::default(),
            net: NetConfig::default(),
            ssl: SslConfig::default(),
            ttc: TtcConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

fn check_schedule(stage: &str, lr_min: f64, lr_max: f64, wd: f64) -> Result<()> {
    if !(lr_min.is_finite() && lr_max.is_finite() && 0.0 <= lr_min && lr_min <= lr_max) {
        return Err(MorphError::Config(format!("{stage}: need 0 <= lr_min <= lr_max, got {lr_min}, {lr_max}")));
    }
    if !(wd.is_finite() && wd >= 0.0) {
        return Err(MorphError::Config(format!("{stage}: weight_decay must be non-negative")));
    }
    Ok(())
}

impl RunConfig {
    /// Parses JSON text; syntax errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| MorphError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            MorphError::Config(m) => MorphError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.net.validate()?;
        if self.data.shape != self.net.input_shape {
            return Err(MorphError::Config(format!(
                "data.shape {:?} differs from net.input_shape {:?}",
                self.data.shape, self.net.input_shape
            )));
        }
        self.ssl.weights.validate()?;
        check_schedule("ssl", self.ssl.lr_min, self.ssl.lr_max, self.ssl.weight_decay)?;
        check_schedule("ttc", self.ttc.lr_min, self.ttc.lr_max, self.ttc.weight_decay)?;
        if !(0.0..1.0).contains(&self.ssl.ema_momentum) {
            return Err(MorphError::Config("ssl.ema_momentum must lie in [0, 1)".into()));
        }
        if self.ssl.steps_per_epoch == 0 || self.ttc.steps_per_epoch == 0 || self.ttc.batch_size == 0 {
            return Err(MorphError::Config("steps_per_epoch and batch_size must be positive".into()));
        }
        if self.data.n_ttc_eyes > 0 && self.ttc.fold >= self.data.n_folds {
            return Err(MorphError::Config(format!("ttc.fold {} out of range for {} folds", self.ttc.fold, self.data.n_folds)));
        }
        if self.eval.horizons.is_empty() || self.eval.horizons.iter().any(|h| !(h.is_finite() && *h >= 0.0)) {
            return Err(MorphError::Config("eval.horizons must be non-empty and non-negative".into()));
        }
        Ok(())
    }
}
