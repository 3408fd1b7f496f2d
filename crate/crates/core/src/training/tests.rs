use super::*;
use crate::manifest::StyleTaxonomy;
use crate::model::{ColumnKind, Mode, Model, ModelConfig, ParamGroup};
use crate::pipeline::{InputConfig, MemorySample, MemorySource};
use crate::saliency::SaliencyMap;
use crate::transforms::ImageGrid;

fn taxonomy(k: usize) -> StyleTaxonomy {
    StyleTaxonomy::new("toy", (0..k).map(|c| format!("class{c}")).collect()).unwrap()
}

/// Class `c` has a bright square in saliency map cell `c`; images are flat gray
/// with a brightness that varies per sample.
fn toy_source(n: usize, classes: usize) -> MemorySource<f64> {
    let samples = (0..n)
        .map(|i| {
            let c = i % classes;
            let (y0, x0) = (16 + 40 * c, 100);
            MemorySample {
                id: format!("s{i:02}"),
                labels: vec![c],
                image: ImageGrid::filled(224, 224, 3, 0.2 + 0.05 * (i % 5) as f64),
                saliency: Some(SaliencyMap::from_fn(224, 224, |y, x| {
                    if (y0..y0 + 24).contains(&y) && (x0..x0 + 24).contains(&x) {
                        1.0
                    } else {
                        0.1
                    }
                })),
            }
        })
        .collect();
    MemorySource { samples }
}

fn saliency_model(classes: usize) -> ModelConfig {
    ModelConfig {
        columns: vec![ColumnKind::Saliency],
        fusion_dim: 16,
        num_classes: classes,
        dropout_rate: 0.0,
        init_seed: 3,
        ..ModelConfig::default()
    }
}

fn plain_config(dir: &std::path::Path) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        head_lr: 0.05,
        augmentation: Augmentation {
            resize_short: 224,
            random_crop: false,
            hflip: false,
        },
        checkpoint_dir: dir.to_path_buf(),
        ..TrainConfig::default()
    }
}

fn weights_of<T: crate::scalar::Real>(m: &Model<T>) -> Vec<Vec<T>> {
    m.parameters().iter().map(|p| p.values.to_vec()).collect()
}

#[test]
fn class_weight_examples() {
    assert_eq!(class_weights(&[3, 3, 3]).unwrap(), vec![1.0, 1.0, 1.0]);
    let w = class_weights(&[4, 1]).unwrap();
    assert!((w[0] - 0.4).abs() < 1e-12 && (w[1] - 1.6).abs() < 1e-12);
    let w = class_weights(&[2, 0, 2]).unwrap();
    assert_eq!(w, vec![1.0, 0.0, 1.0]);
    assert!(matches!(class_weights(&[0, 0]), Err(TrainError::EmptyHistogram)));
}

#[test]
fn config_validation_and_schedule() {
    let mut c = TrainConfig::default();
    assert!(c.validate().is_ok());
    c.batch_size = 0;
    assert!(c.validate().is_err());
    let c = TrainConfig {
        head_lr: -1.0,
        ..TrainConfig::default()
    };
    assert!(c.validate().is_err());
    let s = StepSchedule::default();
    assert_eq!(s.scale(0), 1.0);
    assert_eq!(s.scale(9), 1.0);
    assert_eq!(s.scale(10), 0.1);
    assert!((s.scale(25) - 0.01).abs() < 1e-15);
}

#[test]
fn zero_learning_rate_leaves_weights_and_matches_eval_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_source(8, 3);
    let cfg = TrainConfig {
        base_lr: 0.0,
        head_lr: 0.0,
        ..plain_config(dir.path())
    };
    let mut model = Model::<f64>::new(saliency_model(3)).unwrap();
    let before = weights_of(&model);
    let mut opt = make_optimizer(&model, &cfg).unwrap();
    let mut step = 0;
    let m = train_epoch(&mut model, &data, &mut opt, &cfg, &InputConfig::default(), 0, &mut step, None).unwrap();
    assert_eq!(weights_of(&model), before);
    assert_eq!(m.steps, 2);

    // eval-mode loss over the same batches
    let mut eval_losses = Vec::new();
    let mut order: Vec<usize> = (0..8).collect();
    {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::seed::derive_seed(0, "shuffle", "", 0));
        order.shuffle(&mut rng);
    }
    for batch in order.chunks(4) {
        let inputs: Vec<_> = batch
            .iter()
            .map(|&i| crate::model::ColumnInputs {
                saliency: data.samples[i].saliency.clone(),
                ..Default::default()
            })
            .collect();
        let labels: Vec<usize> = batch.iter().map(|&i| data.samples[i].labels[0]).collect();
        let logits = model.forward(&inputs, Mode::Eval).unwrap();
        eval_losses.push(crate::model::batch_cross_entropy(logits.view(), &labels, None).unwrap().0);
    }
    assert_eq!(m.losses, eval_losses);
}

#[test]
fn fixed_seed_gives_identical_loss_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_source(6, 2);
    let cfg = TrainConfig {
        batch_size: 3,
        augmentation: Augmentation::default(),
        ..plain_config(dir.path())
    };
    let model_cfg = ModelConfig {
        columns: vec![ColumnKind::Saliency, ColumnKind::RgbPatch],
        dropout_rate: 0.5,
        ..saliency_model(2)
    };
    let run = || {
        let mut model = Model::<f32>::new(model_cfg.clone()).unwrap();
        let data: MemorySource<f32> = MemorySource {
            samples: data
                .samples
                .iter()
                .map(|s| MemorySample {
                    id: s.id.clone(),
                    labels: s.labels.clone(),
                    image: ImageGrid::from_fn(240, 260, 3, |c, y, x| ((c + y / 7 + x / 5) % 9) as f32 / 9.0),
                    saliency: s.saliency.as_ref().map(|m| m.cast()),
                })
                .collect(),
        };
        let mut opt = make_optimizer(&model, &cfg).unwrap();
        let mut step = 0;
        let mut losses = Vec::new();
        for epoch in 0..2 {
            let m = train_epoch(&mut model, &data, &mut opt, &cfg, &InputConfig::default(), epoch, &mut step, None).unwrap();
            losses.extend(m.losses.iter().map(|l| l.to_bits()));
        }
        (losses, weights_of(&model))
    };
    let (a, wa) = run();
    let (b, wb) = run();
    assert_eq!(a.len(), 4);
    assert_eq!(a, b);
    assert_eq!(wa, wb);
}

#[test]
fn frozen_backbone_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_source(4, 2);
    let cfg = TrainConfig {
        freeze_backbone: true,
        ..plain_config(dir.path())
    };
    let model_cfg = ModelConfig {
        columns: vec![ColumnKind::Saliency, ColumnKind::RgbPatch],
        backbone_pretrained: true,
        ..saliency_model(2)
    };
    let mut model = Model::<f64>::new(model_cfg).unwrap();
    let group = |m: &Model<f64>, g: ParamGroup| -> Vec<Vec<f64>> {
        m.parameters().iter().filter(|p| p.group == g).map(|p| p.values.to_vec()).collect()
    };
    let bb = group(&model, ParamGroup::Backbone);
    let head = group(&model, ParamGroup::NewLayers);
    let mut opt = make_optimizer(&model, &cfg).unwrap();
    let mut step = 0;
    train_epoch(&mut model, &data, &mut opt, &cfg, &InputConfig::default(), 0, &mut step, None).unwrap();
    assert_eq!(group(&model, ParamGroup::Backbone), bb);
    assert_ne!(group(&model, ParamGroup::NewLayers), head);
}

#[test]
fn missing_saliency_fails_fast() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = toy_source(4, 2);
    data.samples[2].saliency = None;
    let cfg = plain_config(dir.path());
    let mut model = Model::<f64>::new(saliency_model(2)).unwrap();
    let mut opt = make_optimizer(&model, &cfg).unwrap();
    let err = train_epoch(&mut model, &data, &mut opt, &cfg, &InputConfig::default(), 0, &mut 0, None).unwrap_err();
    assert!(err.to_string().contains("s02"), "{err}");
}

#[test]
fn non_finite_loss_aborts() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_source(4, 2);
    let cfg = plain_config(dir.path());
    let mut model = Model::<f64>::new(saliency_model(2)).unwrap();
    let n = model.classifier().weight.len();
    model.set_parameter("classifier.weight", &vec![f64::NAN; n]).unwrap();
    let mut opt = make_optimizer(&model, &cfg).unwrap();
    let err = train_epoch(&mut model, &data, &mut opt, &cfg, &InputConfig::default(), 0, &mut 0, None).unwrap_err();
    assert!(matches!(err, TrainError::NonFinite { epoch: 0, step: 0, .. }));
}

#[test]
fn small_steps_do_not_increase_loss_on_a_fixed_batch() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_source(2, 2);
    let cfg = TrainConfig {
        batch_size: 2,
        head_lr: 1e-3,
        momentum: 0.0,
        weight_decay: 0.0,
        ..plain_config(dir.path())
    };
    let mut model = Model::<f64>::new(saliency_model(2)).unwrap();
    let mut opt = make_optimizer(&model, &cfg).unwrap();
    let mut step = 0;
    let mut losses = Vec::new();
    for epoch in 0..6 {
        losses.push(
            train_epoch(&mut model, &data, &mut opt, &cfg, &InputConfig::default(), epoch, &mut step, None)
                .unwrap()
                .mean_loss,
        );
    }
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "{losses:?}");
    }
}

fn fit_request<'a>(
    data: &'a MemorySource<f64>,
    val: &'a MemorySource<f64>,
    tax: &'a StyleTaxonomy,
    cfg: &'a TrainConfig,
    input: &'a InputConfig,
    resume: Option<std::path::PathBuf>,
) -> FitRequest<'a, f64> {
    FitRequest {
        model: saliency_model(3),
        train: data,
        val: Some(val),
        taxonomy: tax,
        train_config: cfg,
        input,
        config_echo: serde_json::json!({"run": "test"}),
        resume,
    }
}

#[test]
fn single_epoch_fit_writes_two_checkpoints_and_one_log_line() {
    let dir = tempfile::tempdir().unwrap();
    let (data, val, tax) = (toy_source(9, 3), toy_source(6, 3), taxonomy(3));
    let input = InputConfig {
        resize_short: 224,
        ..InputConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 1,
        ..plain_config(dir.path())
    };
    let out = fit(fit_request(&data, &val, &tax, &cfg, &input, None)).unwrap();
    assert!(out.best_checkpoint.exists() && out.last_checkpoint.exists());
    let log = std::fs::read_to_string(&out.log).unwrap();
    assert_eq!(log.lines().count(), 1);
    let entry: EpochLog = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(entry.val_map.is_some());
    assert_eq!(out.state.history.len(), 1);
    let ck = crate::model::load_checkpoint::<f64>(&out.last_checkpoint, Some(&tax)).unwrap();
    assert_eq!(ck.config_echo["run"], "test");
    assert_eq!(ck.step, 3);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (data, val, tax) = (toy_source(9, 3), toy_source(3, 3), taxonomy(3));
    let input = InputConfig {
        resize_short: 224,
        ..InputConfig::default()
    };
    let full_dir = tempfile::tempdir().unwrap();
    let full_cfg = TrainConfig {
        augmentation: Augmentation {
            resize_short: 240,
            ..Augmentation::default()
        },
        ..plain_config(full_dir.path())
    };
    let full = fit(fit_request(&data, &val, &tax, &full_cfg, &input, None)).unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    let part_cfg = TrainConfig {
        epochs: 2,
        checkpoint_dir: part_dir.path().to_path_buf(),
        ..full_cfg.clone()
    };
    let part = fit(fit_request(&data, &val, &tax, &part_cfg, &input, None)).unwrap();
    let resume_cfg = TrainConfig {
        checkpoint_dir: part_dir.path().to_path_buf(),
        ..full_cfg.clone()
    };
    let resumed = fit(fit_request(&data, &val, &tax, &resume_cfg, &input, Some(part.last_checkpoint))).unwrap();

    let a = crate::model::load_checkpoint::<f64>(&full.last_checkpoint, None).unwrap();
    let b = crate::model::load_checkpoint::<f64>(&resumed.last_checkpoint, None).unwrap();
    assert_eq!(weights_of(&a.model), weights_of(&b.model));
    assert_eq!(a.momentum, b.momentum);
    let losses = |s: &TrainState| s.history.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&full.state), losses(&resumed.state));
    assert_eq!(std::fs::read_to_string(&resumed.log).unwrap().lines().count(), 3);
}

#[test]
fn patience_stops_after_stagnant_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, val, tax) = (toy_source(6, 3), toy_source(3, 3), taxonomy(3));
    let input = InputConfig {
        resize_short: 224,
        ..InputConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 10,
        head_lr: 0.0,
        patience: Some(2),
        ..plain_config(dir.path())
    };
    let out = fit(fit_request(&data, &val, &tax, &cfg, &input, None)).unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.state.history.len(), 3);
    assert_eq!(out.state.best_epoch, Some(0));
}
