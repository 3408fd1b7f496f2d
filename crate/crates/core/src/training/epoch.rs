use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Optimizer, TrainConfig, TrainError};
use crate::model::{ColumnInputs, ColumnKind, Mode, Model};
use crate::pipeline::{InputConfig, PatchInputs, SampleSource};
use crate::scalar::Real;
use crate::seed::derive_seed;
use crate::transforms::{random_patch_spec, PATCH_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean of the per-step batch losses.
    pub mean_loss: f64,
    /// Share of samples whose train-mode argmax equals the label.
    pub accuracy: f64,
    pub steps: usize,
    pub losses: Vec<f64>,
}

/// Augmented inputs of sample `index` for `epoch`; a pure function of the seeds.
fn training_inputs<T: Real>(
    data: &dyn SampleSource<T>,
    index: usize,
    columns: &[ColumnKind],
    cfg: &TrainConfig,
    input: &InputConfig,
    epoch: usize,
) -> Result<ColumnInputs<T>, TrainError> {
    let id = data.id(index);
    let sample = data.load(index, columns.contains(&ColumnKind::Saliency))?;
    let input = InputConfig {
        resize_short: cfg.augmentation.resize_short,
        ..input.clone()
    };
    let prepared = PatchInputs::new(id, columns, &input, &sample.image, sample.saliency.as_ref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.global_seed, "augment", id, epoch as u64));
    let mut spec = if cfg.augmentation.random_crop {
        random_patch_spec(prepared.height(), prepared.width(), PATCH_SIZE, &mut rng).map_err(|source| {
            crate::pipeline::PipelineError::Image {
                id: id.to_owned(),
                source,
            }
        })?
    } else {
        prepared.center_spec()
    };
    spec.flip = cfg.augmentation.hflip && rng.random_bool(0.5);
    Ok(prepared.inputs(&spec)?)
}

/// One pass over `data` in a seeded shuffle order. `step` counts optimizer steps
/// across epochs and seeds the dropout masks.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<T: Real>(
    model: &mut Model<T>,
    data: &dyn SampleSource<T>,
    optimizer: &mut Optimizer<T>,
    cfg: &TrainConfig,
    input: &InputConfig,
    epoch: usize,
    step: &mut u64,
    class_weights: Option<&[T]>,
) -> Result<EpochMetrics, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data.id(a).cmp(data.id(b)));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.global_seed, "shuffle", "", epoch as u64));
    order.shuffle(&mut rng);

    let lr_scale = cfg.lr_schedule.scale(epoch);
    let columns = model.config().columns.clone();
    let mut losses = Vec::new();
    let mut correct = 0usize;
    for batch in order.chunks(cfg.batch_size) {
        let inputs = batch
            .par_iter()
            .map(|&i| training_inputs(data, i, &columns, cfg, input, epoch))
            .collect::<Result<Vec<_>, _>>()?;
        let labels: Vec<usize> = batch.iter().map(|&i| data.labels(i)[0]).collect();
        let mode = Mode::Train {
            dropout_seed: derive_seed(cfg.global_seed, "dropout", "", *step),
        };
        let (loss, logits, grads) = model.loss_and_gradients(&inputs, &labels, class_weights, mode)?;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|&i| data.id(i)).collect();
            return Err(TrainError::NonFinite {
                epoch,
                step: *step,
                loss,
                ids: ids.join(","),
            });
        }
        for (row, &label) in logits.rows().into_iter().zip(&labels) {
            let scores: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            if crate::evaluation::argmax(&scores) == label {
                correct += 1;
            }
        }
        optimizer.step(model, &grads, lr_scale)?;
        losses.push(loss);
        *step += 1;
    }
    Ok(EpochMetrics {
        epoch,
        mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        steps: losses.len(),
        losses,
    })
}
