//! Fine-tuning: momentum SGD with two learning-rate groups, seeded epochs,
//! validation-based model selection, checkpoints and resume.

mod epoch;
mod fit;
mod optimizer;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use epoch::{train_epoch, EpochMetrics};
pub use fit::{fit, EpochLog, FitOutput, FitRequest, TrainState, BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG};
pub use optimizer::{make_optimizer, sgd_update, Optimizer};

use crate::evaluation::{EvalError, PatchPolicy};
use crate::model::ModelError;
use crate::pipeline::PipelineError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training samples")]
    EmptyData,
    #[error("class histogram is empty")]
    EmptyHistogram,
    #[error("non-finite loss {loss} at epoch {epoch}, step {step} (batch ids: {ids})")]
    NonFinite { epoch: usize, step: u64, loss: f64, ids: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Multiply every learning rate by `factor` each `period` epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepSchedule {
    pub factor: f64,
    pub period: usize,
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule { factor: 0.1, period: 10 }
    }
}

impl StepSchedule {
    /// Learning-rate multiplier for a zero-based epoch.
    pub fn scale(&self, epoch: usize) -> f64 {
        match epoch.checked_div(self.period) {
            Some(k) => self.factor.powi(k as i32),
            None => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augmentation {
    /// Short side after resizing, before cropping.
    pub resize_short: usize,
    /// Random crop position; the centered crop otherwise.
    pub random_crop: bool,
    pub hflip: bool,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            resize_short: 256,
            random_crop: true,
            hflip: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the backbone group.
    pub base_lr: f64,
    /// Learning rate of the new layers (fusion, classifier, non-pretrained backbone).
    pub head_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: StepSchedule,
    pub global_seed: u64,
    pub class_weighting: bool,
    pub augmentation: Augmentation,
    pub checkpoint_dir: PathBuf,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub freeze_backbone: bool,
    /// Patches per validation image.
    pub val_patches: PatchPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            base_lr: 1e-3,
            head_lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_schedule: StepSchedule::default(),
            global_seed: 0,
            class_weighting: false,
            augmentation: Augmentation::default(),
            checkpoint_dir: PathBuf::from("checkpoints"),
            patience: None,
            freeze_backbone: false,
            val_patches: PatchPolicy::Center,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.to_owned()));
        if self.epochs == 0 {
            return err("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1");
        }
        for (name, v) in [("base_lr", self.base_lr), ("head_lr", self.head_lr), ("weight_decay", self.weight_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return err(&format!("{name} must be finite and non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err("momentum must lie in [0, 1)");
        }
        if !(self.lr_schedule.factor.is_finite() && self.lr_schedule.factor > 0.0) {
            return err("lr_schedule.factor must be positive");
        }
        Ok(())
    }
}

/// Inverse-frequency loss weights `N / (K·count)`, rescaled to mean 1 over the
/// classes that occur. Classes without samples get weight 0 and a warning.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>, TrainError> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(TrainError::EmptyHistogram);
    }
    let k = counts.len() as f64;
    let raw: Vec<f64> = counts
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            if n == 0 {
                log::warn!("class {c} has no training samples; its loss weight is 0");
                0.0
            } else {
                total as f64 / (k * n as f64)
            }
        })
        .collect();
    let present = counts.iter().filter(|&&n| n > 0).count() as f64;
    let mean = raw.iter().sum::<f64>() / present;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

#[cfg(test)]
mod tests;
