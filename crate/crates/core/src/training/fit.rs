use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{class_weights, make_optimizer, train_epoch, TrainConfig, TrainError};
use crate::evaluation::{predict_source, report_from_predictions, PredictConfig};
use crate::manifest::StyleTaxonomy;
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, Model, ModelConfig};
use crate::pipeline::{InputConfig, SampleSource};
use crate::scalar::Real;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
    /// Learning rate of the new-layer group.
    pub lr: f64,
    pub val_map: Option<f64>,
    /// Seconds since the start of this process's run.
    pub wall_time: f64,
}

/// Trainer bookkeeping stored in every checkpoint. Shuffles, augmentation and
/// dropout are derived from the seed, epoch and step, so these counters together
/// with the momentum buffers are the whole resumable state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub best_val_map: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stale_epochs: usize,
    pub history: Vec<EpochLog>,
}

pub struct FitRequest<'a, T> {
    pub model: ModelConfig,
    pub train: &'a dyn SampleSource<T>,
    pub val: Option<&'a dyn SampleSource<T>>,
    pub taxonomy: &'a StyleTaxonomy,
    pub train_config: &'a TrainConfig,
    pub input: &'a InputConfig,
    /// Resolved configuration echoed into checkpoints.
    pub config_echo: serde_json::Value,
    /// Continue from this checkpoint (normally `last.ckpt`).
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutput {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log: PathBuf,
    pub state: TrainState,
    pub stopped_early: bool,
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Runs the epochs of `req`, validating after each and keeping the best and last
/// checkpoints plus a line-per-epoch log in the checkpoint directory.
pub fn fit<T: Real>(req: FitRequest<'_, T>) -> Result<FitOutput, TrainError> {
    let cfg = req.train_config;
    cfg.validate()?;
    if req.train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let dir = &cfg.checkpoint_dir;
    fs::create_dir_all(dir).map_err(io(dir))?;
    let best_path = dir.join(BEST_CHECKPOINT);
    let last_path = dir.join(LAST_CHECKPOINT);
    let log_path = dir.join(TRAIN_LOG);

    let (mut model, mut state, momentum) = match &req.resume {
        Some(path) => {
            let ck = load_checkpoint::<T>(path, Some(req.taxonomy))?;
            if ck.model.config().columns != req.model.columns {
                log::warn!("resuming with the model config stored in {}", path.display());
            }
            let state: TrainState = serde_json::from_value(ck.train_state.clone())
                .map_err(|e| TrainError::Config(format!("bad train state in {}: {e}", path.display())))?;
            (ck.model, state, Some(ck.momentum))
        }
        None => (Model::<T>::new(req.model.clone())?, TrainState::default(), None),
    };
    if model.num_classes() != req.taxonomy.len() {
        return Err(TrainError::Config(format!(
            "model has {} classes, taxonomy '{}' has {}",
            model.num_classes(),
            req.taxonomy.name(),
            req.taxonomy.len()
        )));
    }
    if req.resume.is_none() && best_path.exists() {
        fs::remove_file(&best_path).map_err(io(&best_path))?;
    }
    let mut optimizer = make_optimizer(&model, cfg)?;
    if let Some(m) = &momentum {
        optimizer.restore_momentum(m)?;
    }

    let weights: Option<Vec<T>> = if cfg.class_weighting {
        let mut counts = vec![0usize; req.taxonomy.len()];
        for i in 0..req.train.len() {
            counts[req.train.labels(i)[0]] += 1;
        }
        Some(class_weights(&counts)?.into_iter().map(T::of).collect())
    } else {
        None
    };

    let mut log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(req.resume.is_some())
        .truncate(req.resume.is_none())
        .open(&log_path)
        .map_err(io(&log_path))?;
    let val_cfg = PredictConfig {
        test_patches: cfg.val_patches,
        seed: cfg.global_seed,
        ..PredictConfig::default()
    };
    let started = Instant::now();
    let mut stopped_early = false;

    while state.epoch < cfg.epochs {
        if let Some(p) = cfg.patience {
            if state.stale_epochs >= p {
                stopped_early = true;
                break;
            }
        }
        let epoch = state.epoch;
        let metrics = train_epoch(
            &mut model,
            req.train,
            &mut optimizer,
            cfg,
            req.input,
            epoch,
            &mut state.step,
            weights.as_deref(),
        )?;
        let val_map = match req.val {
            Some(val) if !val.is_empty() => {
                let preds = predict_source(&model, val, req.input, &val_cfg)?;
                report_from_predictions(&preds, req.taxonomy, serde_json::Value::Null)?.map
            }
            _ => None,
        };
        let improved = match (val_map, state.best_val_map) {
            (Some(v), Some(best)) => v > best,
            (Some(_), None) => true,
            // without validation the latest weights are the best known
            (None, _) => req.val.is_none_or(|v| v.is_empty()),
        };
        state.epoch += 1;
        if improved {
            state.best_val_map = val_map.or(state.best_val_map);
            state.best_epoch = Some(epoch);
            state.stale_epochs = 0;
        } else {
            state.stale_epochs += 1;
        }
        let entry = EpochLog {
            epoch,
            step: state.step,
            loss: metrics.mean_loss,
            accuracy: metrics.accuracy,
            lr: cfg.head_lr * cfg.lr_schedule.scale(epoch),
            val_map,
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:.3} val_map {:?}",
            entry.loss,
            entry.accuracy,
            entry.val_map
        );
        writeln!(log_file, "{}", serde_json::to_string(&entry).expect("log entries serialize")).map_err(io(&log_path))?;
        state.history.push(entry);

        let ckpt = Checkpoint {
            model,
            taxonomy: req.taxonomy.clone(),
            step: state.step,
            train_state: serde_json::to_value(&state).expect("train state serializes"),
            config_echo: req.config_echo.clone(),
            momentum: optimizer.momentum_buffers(),
        };
        if improved {
            save_checkpoint(&best_path, &ckpt)?;
        }
        save_checkpoint(&last_path, &ckpt)?;
        model = ckpt.model;
    }
    if !best_path.exists() {
        // resumed runs that never improved still leave a best checkpoint
        fs::copy(&last_path, &best_path).map_err(io(&best_path))?;
    }
    Ok(FitOutput {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        log: log_path,
        state,
        stopped_early,
    })
}
