//! The two-column network.
//!
//! The saliency column has no weights: two 2×2 stride-2 max-pools reduce a 224×224 map
//! to 56×56, which is flattened straight into the fusion layer so that position
//! survives. RGB columns run a backbone and global-average-pool its last feature map.
//! Column features are concatenated in declared order, passed through a fully
//! connected fusion layer (ReLU, dropout) and a final classifier layer.

mod backbone;
mod checkpoint;
mod layers;
mod loss;

use std::fmt;

use ndarray::{s, Array1, Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backbone::{BackboneCache, ConvStage, RgbBackbone, ToyBackbone, TOY_BACKBONE};
pub use checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint, Checkpoint, CheckpointHeader, FORMAT_VERSION};
pub use layers::Linear;
pub use loss::{batch_cross_entropy, cross_entropy, softmax, softmax_rows};

use crate::saliency::SaliencyMap;
use crate::scalar::Real;
use crate::transforms::PATCH_SIZE;

/// Side of the pooled saliency grid.
pub const SALIENCY_GRID: usize = PATCH_SIZE / 4;
/// Length of the saliency column output: 56·56.
pub const SALIENCY_FEATURE_DIM: usize = SALIENCY_GRID * SALIENCY_GRID;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("unknown backbone '{0}'")]
    UnknownBackbone(String),
    #[error("bad input: {0}")]
    InputShape(String),
    #[error("missing input for column {0}")]
    MissingInput(ColumnKind),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch mismatch: {0}")]
    BatchMismatch(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    /// Pooled saliency map, no parameters.
    Saliency,
    /// Backbone over a cropped RGB patch.
    RgbPatch,
    /// Backbone over the whole image warped to the patch size.
    RgbWarp,
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnKind::Saliency => "saliency",
            ColumnKind::RgbPatch => "rgb_patch",
            ColumnKind::RgbWarp => "rgb_warp",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub columns: Vec<ColumnKind>,
    pub backbone_id: String,
    /// Filled from the backbone's report when the model is built.
    pub rgb_feature_dim: Option<usize>,
    /// Backbone weights come from a pretrained source; puts them in the backbone
    /// parameter group instead of with the new layers.
    pub backbone_pretrained: bool,
    pub fusion_dim: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    /// Optional learned linear projection of the saliency features (ablation hook).
    pub saliency_projection: Option<usize>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            columns: vec![ColumnKind::Saliency, ColumnKind::RgbPatch],
            backbone_id: TOY_BACKBONE.to_owned(),
            rgb_feature_dim: None,
            backbone_pretrained: false,
            fusion_dim: 512,
            num_classes: 14,
            dropout_rate: 0.5,
            saliency_projection: None,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn saliency_feature_dim(&self) -> usize {
        SALIENCY_FEATURE_DIM
    }

    pub fn has(&self, kind: ColumnKind) -> bool {
        self.columns.contains(&kind)
    }

    pub fn has_rgb(&self) -> bool {
        self.has(ColumnKind::RgbPatch) || self.has(ColumnKind::RgbWarp)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.columns.is_empty() {
            return err("a model needs at least one column".into());
        }
        for (i, c) in self.columns.iter().enumerate() {
            if self.columns[..i].contains(c) {
                return err(format!("column {c} declared twice"));
            }
        }
        if self.fusion_dim == 0 || self.num_classes == 0 {
            return err("fusion_dim and num_classes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.saliency_projection == Some(0) {
            return err("saliency_projection must be positive".into());
        }
        if self.has_rgb() {
            let reported = RgbBackbone::<f64>::reported_dim(&self.backbone_id)?;
            if let Some(d) = self.rgb_feature_dim {
                if d != reported {
                    return err(format!(
                        "rgb_feature_dim {d} disagrees with backbone '{}' ({reported})",
                        self.backbone_id
                    ));
                }
            }
        }
        Ok(())
    }

    /// Output width of each column, in declared order.
    pub fn column_dims(&self) -> Result<Vec<usize>, ModelError> {
        self.columns
            .iter()
            .map(|c| match c {
                ColumnKind::Saliency => Ok(self.saliency_projection.unwrap_or(SALIENCY_FEATURE_DIM)),
                _ => RgbBackbone::<f64>::reported_dim(&self.backbone_id),
            })
            .collect()
    }

    pub fn fusion_input_dim(&self) -> Result<usize, ModelError> {
        Ok(self.column_dims()?.iter().sum())
    }
}

/// Forward-pass behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, mask drawn from the given seed.
    Train { dropout_seed: u64 },
}

/// Inputs of one sample; only the configured columns need to be present.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColumnInputs<T> {
    pub saliency: Option<SaliencyMap<T>>,
    pub rgb_patch: Option<Array3<T>>,
    pub rgb_warp: Option<Array3<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    NewLayers,
}

pub struct ParamRef<'a, T> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub values: &'a [T],
}

pub struct ParamMut<'a, T> {
    pub name: String,
    pub group: ParamGroup,
    pub values: &'a mut [T],
}

/// Parameter gradients aligned with [`Model::parameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub names: Vec<String>,
    pub values: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i].as_slice())
    }
}

/// Parameter counts per optimizer group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub backbone: usize,
    pub new_layers: usize,
}

/// Parameter-free saliency column: 224×224 → two 2×2 max-pools → 56·56 features.
pub fn saliency_column_forward<T: Real>(map: &SaliencyMap<T>) -> Result<Vec<T>, ModelError> {
    if map.height() != PATCH_SIZE || map.width() != PATCH_SIZE {
        return Err(ModelError::InputShape(format!(
            "saliency column expects {PATCH_SIZE}x{PATCH_SIZE}, got {}x{}",
            map.height(),
            map.width()
        )));
    }
    let half = layers::max_pool2x2_plane(map.data(), PATCH_SIZE, PATCH_SIZE);
    Ok(layers::max_pool2x2_plane(&half, PATCH_SIZE / 2, PATCH_SIZE / 2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    rgb_patch: Option<RgbBackbone<T>>,
    rgb_warp: Option<RgbBackbone<T>>,
    projection: Option<Linear<T>>,
    fusion: Linear<T>,
    classifier: Linear<T>,
}

struct ForwardCache<T> {
    features: Array2<T>,
    saliency_raw: Option<Array2<T>>,
    patch_caches: Vec<Option<BackboneCache<T>>>,
    warp_caches: Vec<Option<BackboneCache<T>>>,
    fusion_pre: Array2<T>,
    hidden: Array2<T>,
    mask: Option<Array2<T>>,
}

impl<T: Real> Model<T> {
    /// Builds a model with weights drawn from `config.init_seed`.
    pub fn new(mut config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let rgb_patch = if config.has(ColumnKind::RgbPatch) {
            Some(RgbBackbone::build(&config.backbone_id, &mut rng)?)
        } else {
            None
        };
        let rgb_warp = if config.has(ColumnKind::RgbWarp) {
            Some(RgbBackbone::build(&config.backbone_id, &mut rng)?)
        } else {
            None
        };
        if config.has_rgb() {
            config.rgb_feature_dim = Some(RgbBackbone::<T>::reported_dim(&config.backbone_id)?);
        }
        let projection = config
            .saliency_projection
            .filter(|_| config.has(ColumnKind::Saliency))
            .map(|p| Linear::init(SALIENCY_FEATURE_DIM, p, 1.0, &mut rng));
        let fusion = Linear::init(config.fusion_input_dim()?, config.fusion_dim, 2.0, &mut rng);
        let classifier = Linear::init(config.fusion_dim, config.num_classes, 1.0, &mut rng);
        Ok(Model {
            config,
            rgb_patch,
            rgb_warp,
            projection,
            fusion,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn fusion(&self) -> &Linear<T> {
        &self.fusion
    }

    pub fn fusion_mut(&mut self) -> &mut Linear<T> {
        &mut self.fusion
    }

    pub fn classifier(&self) -> &Linear<T> {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Linear<T> {
        &mut self.classifier
    }

    pub fn backbone_mut(&mut self, kind: ColumnKind) -> Option<&mut RgbBackbone<T>> {
        match kind {
            ColumnKind::RgbPatch => self.rgb_patch.as_mut(),
            ColumnKind::RgbWarp => self.rgb_warp.as_mut(),
            ColumnKind::Saliency => None,
        }
    }

    /// Range of fusion-layer input columns fed by `kind`.
    pub fn column_span(&self, kind: ColumnKind) -> Option<std::ops::Range<usize>> {
        let dims = self.config.column_dims().ok()?;
        let mut start = 0;
        for (c, d) in self.config.columns.iter().zip(dims) {
            if *c == kind {
                return Some(start..start + d);
            }
            start += d;
        }
        None
    }

    fn backbone_group(&self) -> ParamGroup {
        if self.config.backbone_pretrained {
            ParamGroup::Backbone
        } else {
            ParamGroup::NewLayers
        }
    }

    /// Every parameter in a fixed order: RGB backbones, saliency projection, fusion, classifier.
    pub fn parameters(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        let bg = self.backbone_group();
        for (prefix, bb) in [("rgb_patch", &self.rgb_patch), ("rgb_warp", &self.rgb_warp)] {
            if let Some(bb) = bb {
                for (name, shape, values) in bb.params() {
                    out.push(ParamRef {
                        name: format!("{prefix}.{name}"),
                        group: bg,
                        shape,
                        values,
                    });
                }
            }
        }
        let linears: Vec<(&str, &Linear<T>)> = self
            .projection
            .iter()
            .map(|p| ("saliency_projection", p))
            .chain([("fusion", &self.fusion), ("classifier", &self.classifier)])
            .collect();
        for (prefix, l) in linears {
            out.push(ParamRef {
                name: format!("{prefix}.weight"),
                group: ParamGroup::NewLayers,
                shape: l.weight.shape().to_vec(),
                values: l.weight.as_slice().expect("contiguous"),
            });
            out.push(ParamRef {
                name: format!("{prefix}.bias"),
                group: ParamGroup::NewLayers,
                shape: l.bias.shape().to_vec(),
                values: l.bias.as_slice().expect("contiguous"),
            });
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let bg = self.backbone_group();
        let mut out = Vec::new();
        for (prefix, bb) in [("rgb_patch", &mut self.rgb_patch), ("rgb_warp", &mut self.rgb_warp)] {
            if let Some(bb) = bb {
                for (name, values) in bb.params_mut() {
                    out.push(ParamMut {
                        name: format!("{prefix}.{name}"),
                        group: bg,
                        values,
                    });
                }
            }
        }
        let linears: Vec<(&str, &mut Linear<T>)> = self
            .projection
            .iter_mut()
            .map(|p| ("saliency_projection", p))
            .chain([("fusion", &mut self.fusion), ("classifier", &mut self.classifier)])
            .collect();
        for (prefix, l) in linears {
            out.push(ParamMut {
                name: format!("{prefix}.weight"),
                group: ParamGroup::NewLayers,
                values: l.weight.as_slice_mut().expect("contiguous"),
            });
            out.push(ParamMut {
                name: format!("{prefix}.bias"),
                group: ParamGroup::NewLayers,
                values: l.bias.as_slice_mut().expect("contiguous"),
            });
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.values.len()).sum()
    }

    pub fn parameter_groups(&self) -> GroupCounts {
        let mut counts = GroupCounts::default();
        for p in self.parameters() {
            match p.group {
                ParamGroup::Backbone => counts.backbone += p.values.len(),
                ParamGroup::NewLayers => counts.new_layers += p.values.len(),
            }
        }
        counts
    }

    fn check_inputs(&self, batch: &[ColumnInputs<T>]) -> Result<(), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::BatchMismatch("empty batch".into()));
        }
        for item in batch {
            for &c in &self.config.columns {
                let present = match c {
                    ColumnKind::Saliency => item.saliency.is_some(),
                    ColumnKind::RgbPatch => item.rgb_patch.is_some(),
                    ColumnKind::RgbWarp => item.rgb_warp.is_some(),
                };
                if !present {
                    return Err(ModelError::MissingInput(c));
                }
            }
        }
        Ok(())
    }

    fn run(&self, batch: &[ColumnInputs<T>], mode: Mode, keep: bool) -> Result<(Array2<T>, ForwardCache<T>), ModelError> {
        self.check_inputs(batch)?;
        let b = batch.len();
        let width = self.config.fusion_input_dim()?;

        let saliency_raw = if self.config.has(ColumnKind::Saliency) {
            let mut raw = Array2::zeros((b, SALIENCY_FEATURE_DIM));
            for (i, item) in batch.iter().enumerate() {
                let f = saliency_column_forward(item.saliency.as_ref().expect("checked"))?;
                raw.row_mut(i).assign(&Array1::from(f));
            }
            Some(raw)
        } else {
            None
        };
        let run_backbone = |bb: &Option<RgbBackbone<T>>, pick: fn(&ColumnInputs<T>) -> Option<&Array3<T>>| {
            bb.as_ref().map(|bb| {
                batch
                    .par_iter()
                    .map(|item| bb.forward(pick(item).expect("checked")))
                    .collect::<Result<Vec<_>, _>>()
            })
        };
        let patch = run_backbone(&self.rgb_patch, |i| i.rgb_patch.as_ref()).transpose()?;
        let warp = run_backbone(&self.rgb_warp, |i| i.rgb_warp.as_ref()).transpose()?;

        let mut features = Array2::zeros((b, width));
        let mut col = 0;
        let mut patch_caches: Vec<Option<BackboneCache<T>>> = (0..b).map(|_| None).collect();
        let mut warp_caches: Vec<Option<BackboneCache<T>>> = (0..b).map(|_| None).collect();
        let (mut patch, mut warp) = (patch, warp);
        for &c in &self.config.columns {
            match c {
                ColumnKind::Saliency => {
                    let raw = saliency_raw.as_ref().expect("saliency column");
                    let f = match &self.projection {
                        Some(p) => p.forward(raw.view()),
                        None => raw.clone(),
                    };
                    let d = f.ncols();
                    features.slice_mut(s![.., col..col + d]).assign(&f);
                    col += d;
                }
                ColumnKind::RgbPatch | ColumnKind::RgbWarp => {
                    let (outs, caches) = if c == ColumnKind::RgbPatch {
                        (patch.take().expect("patch column"), &mut patch_caches)
                    } else {
                        (warp.take().expect("warp column"), &mut warp_caches)
                    };
                    let mut d = 0;
                    for (i, (feat, cache)) in outs.into_iter().enumerate() {
                        d = feat.len();
                        features.slice_mut(s![i, col..col + d]).assign(&feat);
                        if keep {
                            caches[i] = Some(cache);
                        }
                    }
                    col += d;
                }
            }
        }

        let fusion_pre = self.fusion.forward(features.view());
        let mut hidden = fusion_pre.clone();
        layers::relu_inplace(hidden.as_slice_mut().expect("contiguous"));
        let mask = match mode {
            Mode::Train { dropout_seed } if self.config.dropout_rate > 0.0 => {
                let p = self.config.dropout_rate;
                let scale = T::of(1.0 / (1.0 - p));
                let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                let m = Array2::from_shape_simple_fn(hidden.raw_dim(), || {
                    if rng.random::<f64>() < p {
                        T::zero()
                    } else {
                        scale
                    }
                });
                hidden *= &m;
                Some(m)
            }
            _ => None,
        };
        let logits = self.classifier.forward(hidden.view());
        Ok((
            logits,
            ForwardCache {
                features,
                saliency_raw,
                patch_caches,
                warp_caches,
                fusion_pre,
                hidden,
                mask,
            },
        ))
    }

    /// Logits for a batch, one row per sample.
    pub fn forward(&self, batch: &[ColumnInputs<T>], mode: Mode) -> Result<Array2<T>, ModelError> {
        self.run(batch, mode, false).map(|(l, _)| l)
    }

    /// Class probabilities (eval mode).
    pub fn predict_proba(&self, batch: &[ColumnInputs<T>]) -> Result<Array2<T>, ModelError> {
        Ok(softmax_rows(self.forward(batch, Mode::Eval)?.view()))
    }

    /// Concatenated column features (before fusion) in declared column order.
    pub fn column_features(&self, batch: &[ColumnInputs<T>]) -> Result<Array2<T>, ModelError> {
        self.run(batch, Mode::Eval, false).map(|(_, c)| c.features)
    }

    /// Batch loss, logits and gradients of every parameter.
    pub fn loss_and_gradients(
        &self,
        batch: &[ColumnInputs<T>],
        labels: &[usize],
        class_weights: Option<&[T]>,
        mode: Mode,
    ) -> Result<(T, Array2<T>, Gradients<T>), ModelError> {
        let (logits, cache) = self.run(batch, mode, true)?;
        let (loss, dlogits) = batch_cross_entropy(logits.view(), labels, class_weights)?;
        let grads = self.backward(&cache, dlogits.view());
        Ok((loss, logits, grads))
    }

    fn backward(&self, cache: &ForwardCache<T>, dlogits: ArrayView2<T>) -> Gradients<T> {
        let cls = self.classifier.backward(cache.hidden.view(), dlogits, true);
        let mut dhidden = cls.input;
        if let Some(m) = &cache.mask {
            dhidden *= m;
        }
        ndarray::Zip::from(&mut dhidden)
            .and(&cache.fusion_pre)
            .for_each(|d, &z| {
                if !(z > T::zero()) {
                    *d = T::zero();
                }
            });
        let need_input = self.projection.is_some() || self.config.has_rgb();
        let fus = self.fusion.backward(cache.features.view(), dhidden.view(), need_input);

        let mut per_column: Vec<(ColumnKind, Vec<Vec<T>>)> = Vec::new();
        let dims = self.config.column_dims().expect("validated");
        let mut col = 0;
        for (&c, &d) in self.config.columns.iter().zip(&dims) {
            match c {
                ColumnKind::Saliency => {
                    if let (Some(p), Some(raw)) = (&self.projection, &cache.saliency_raw) {
                        let dproj = fus.input.slice(s![.., col..col + d]);
                        let g = p.backward(raw.view(), dproj, false);
                        per_column.push((c, vec![g.weight.into_raw_vec_and_offset().0, g.bias.to_vec()]));
                    }
                }
                ColumnKind::RgbPatch | ColumnKind::RgbWarp => {
                    let (bb, caches) = if c == ColumnKind::RgbPatch {
                        (self.rgb_patch.as_ref().expect("patch backbone"), &cache.patch_caches)
                    } else {
                        (self.rgb_warp.as_ref().expect("warp backbone"), &cache.warp_caches)
                    };
                    let item_grads: Vec<Vec<Vec<T>>> = caches
                        .par_iter()
                        .enumerate()
                        .map(|(i, cache)| {
                            let dfeat: Vec<T> = fus.input.slice(s![i, col..col + d]).to_vec();
                            bb.backward(cache.as_ref().expect("kept cache"), &dfeat)
                        })
                        .collect();
                    // fixed-order reduction keeps results independent of scheduling
                    let mut total = item_grads[0].clone();
                    for g in &item_grads[1..] {
                        for (acc, v) in total.iter_mut().zip(g) {
                            acc.iter_mut().zip(v).for_each(|(a, &b)| *a += b);
                        }
                    }
                    per_column.push((c, total));
                }
            }
            col += d;
        }

        let mut names = Vec::new();
        let mut values = Vec::new();
        let params = self.parameters();
        let mut pi = 0;
        let mut push = |vals: Vec<T>, names: &mut Vec<String>, values: &mut Vec<Vec<T>>| {
            names.push(params[pi].name.clone());
            debug_assert_eq!(params[pi].values.len(), vals.len(), "{}", params[pi].name);
            values.push(vals);
            pi += 1;
        };
        for kind in [ColumnKind::RgbPatch, ColumnKind::RgbWarp, ColumnKind::Saliency] {
            if let Some((_, gs)) = per_column.iter().find(|(c, _)| *c == kind) {
                for g in gs {
                    push(g.clone(), &mut names, &mut values);
                }
            }
        }
        push(fus.weight.into_raw_vec_and_offset().0, &mut names, &mut values);
        push(fus.bias.to_vec(), &mut names, &mut values);
        push(cls.weight.into_raw_vec_and_offset().0, &mut names, &mut values);
        push(cls.bias.to_vec(), &mut names, &mut values);
        Gradients { names, values }
    }

    /// Overwrites a named parameter; `values` must match its length.
    pub fn set_parameter(&mut self, name: &str, values: &[T]) -> Result<(), ModelError> {
        let mut params = self.parameters_mut();
        let p = params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| ModelError::Config(format!("no parameter named '{name}'")))?;
        if p.values.len() != values.len() {
            return Err(ModelError::Config(format!(
                "parameter '{name}' has {} values, got {}",
                p.values.len(),
                values.len()
            )));
        }
        p.values.copy_from_slice(values);
        Ok(())
    }
}
