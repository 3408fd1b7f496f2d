//! Sample sources and assembly of per-patch network inputs, shared by training and
//! evaluation.

use std::path::PathBuf;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{DataLayout, ImageRecord, StyleTaxonomy};
use crate::model::{ColumnInputs, ColumnKind};
use crate::saliency::{self, align_to_patch, AlignMode, SaliencyError, SaliencyMap};
use crate::scalar::Real;
use crate::transforms::{self, apply_patch, hflip, normalize, warp_resize, ImageGrid, PatchSpec, TransformError, PATCH_SIZE};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("record {id}: {source}")]
    Image {
        id: String,
        #[source]
        source: TransformError,
    },
    #[error("record {id}: {source}")]
    Saliency {
        id: String,
        #[source]
        source: SaliencyError,
    },
    #[error("record {id}: no saliency map available")]
    MissingSaliency { id: String },
    #[error("record {id}: label '{label}' is not in the taxonomy")]
    Label { id: String, label: String },
}

/// How images become network inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    /// Short side after resizing; patches are cut from the resized image.
    pub resize_short: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub alignment: AlignMode,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            resize_short: 256,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            alignment: AlignMode::Aligned,
        }
    }
}

/// A decoded image and its saliency map, if one was requested.
pub struct LoadedSample<T> {
    pub image: ImageGrid<T>,
    pub saliency: Option<SaliencyMap<T>>,
}

/// Indexed access to labelled samples.
pub trait SampleSource<T>: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn id(&self, index: usize) -> &str;

    /// Label indices; the first one is the primary label.
    fn labels(&self, index: usize) -> &[usize];

    fn load(&self, index: usize, need_saliency: bool) -> Result<LoadedSample<T>, PipelineError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemorySample<T> {
    pub id: String,
    pub labels: Vec<usize>,
    pub image: ImageGrid<T>,
    pub saliency: Option<SaliencyMap<T>>,
}

/// Samples held in memory (synthetic data, tests).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemorySource<T> {
    pub samples: Vec<MemorySample<T>>,
}

impl<T: Real> SampleSource<T> for MemorySource<T> {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.samples[index].id
    }

    fn labels(&self, index: usize) -> &[usize] {
        &self.samples[index].labels
    }

    fn load(&self, index: usize, need_saliency: bool) -> Result<LoadedSample<T>, PipelineError> {
        let s = &self.samples[index];
        if need_saliency && s.saliency.is_none() {
            return Err(PipelineError::MissingSaliency { id: s.id.clone() });
        }
        Ok(LoadedSample {
            image: s.image.clone(),
            saliency: if need_saliency { s.saliency.clone() } else { None },
        })
    }
}

struct DiskItem {
    id: String,
    labels: Vec<usize>,
    image: PathBuf,
    saliency: Option<PathBuf>,
}

/// Samples read lazily from disk following a [`DataLayout`].
pub struct DiskSource {
    items: Vec<DiskItem>,
}

impl DiskSource {
    pub fn new(records: &[&ImageRecord], taxonomy: &StyleTaxonomy, layout: &DataLayout) -> Result<Self, PipelineError> {
        let items = records
            .iter()
            .map(|r| {
                let labels = r
                    .labels
                    .iter()
                    .map(|l| {
                        taxonomy.index_of(l).ok_or_else(|| PipelineError::Label {
                            id: r.id.clone(),
                            label: l.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(DiskItem {
                    id: r.id.clone(),
                    labels,
                    image: layout.image_path(r),
                    saliency: layout.saliency_root.as_ref().map(|root| saliency::map_path(root, &r.id)),
                })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        Ok(DiskSource { items })
    }
}

impl<T: Real> SampleSource<T> for DiskSource {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.items[index].id
    }

    fn labels(&self, index: usize) -> &[usize] {
        &self.items[index].labels
    }

    fn load(&self, index: usize, need_saliency: bool) -> Result<LoadedSample<T>, PipelineError> {
        let item = &self.items[index];
        let image = transforms::load_image(&item.image).map_err(|source| PipelineError::Image {
            id: item.id.clone(),
            source,
        })?;
        let saliency = if need_saliency {
            let path = item
                .saliency
                .as_ref()
                .ok_or_else(|| PipelineError::MissingSaliency { id: item.id.clone() })?;
            Some(saliency::load_saliency(path).map_err(|source| match source {
                SaliencyError::Missing { .. } => PipelineError::MissingSaliency { id: item.id.clone() },
                source => PipelineError::Saliency {
                    id: item.id.clone(),
                    source,
                },
            })?)
        } else {
            None
        };
        Ok(LoadedSample { image, saliency })
    }
}

/// One image resized for patch extraction, ready to produce inputs for any patch.
pub struct PatchInputs<'a, T> {
    id: &'a str,
    columns: &'a [ColumnKind],
    input: &'a InputConfig,
    image: ImageGrid<T>,
    map: Option<&'a SaliencyMap<T>>,
    warped: Option<[Array3<T>; 2]>,
}

impl<'a, T: Real> PatchInputs<'a, T> {
    pub fn new(
        id: &'a str,
        columns: &'a [ColumnKind],
        input: &'a InputConfig,
        image: &ImageGrid<T>,
        map: Option<&'a SaliencyMap<T>>,
    ) -> Result<Self, PipelineError> {
        if columns.contains(&ColumnKind::Saliency) && map.is_none() {
            return Err(PipelineError::MissingSaliency { id: id.to_owned() });
        }
        let target = input.resize_short.max(PATCH_SIZE);
        let image = if image.height().min(image.width()) == target {
            image.clone()
        } else {
            transforms::resize_short_side(image, target)
        };
        let mut out = PatchInputs {
            id,
            columns,
            input,
            image,
            map,
            warped: None,
        };
        if columns.contains(&ColumnKind::RgbWarp) {
            let w = warp_resize(&out.image, PATCH_SIZE, PATCH_SIZE);
            let flipped = hflip(&w);
            out.warped = Some([out.normalized(&w)?, out.normalized(&flipped)?]);
        }
        Ok(out)
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    fn image_err(&self, source: TransformError) -> PipelineError {
        PipelineError::Image {
            id: self.id.to_owned(),
            source,
        }
    }

    fn normalized(&self, img: &ImageGrid<T>) -> Result<Array3<T>, PipelineError> {
        let mean = self.input.mean.map(T::of);
        let std = self.input.std.map(T::of);
        normalize(img, &mean, &std).map_err(|e| self.image_err(e))
    }

    /// Inputs of every configured column for the patch `spec` of the resized image.
    pub fn inputs(&self, spec: &PatchSpec) -> Result<ColumnInputs<T>, PipelineError> {
        let mut out = ColumnInputs::default();
        for &c in self.columns {
            match c {
                ColumnKind::Saliency => {
                    let map = self.map.expect("checked in new");
                    let aligned = align_to_patch(map, spec, self.height(), self.width(), self.input.alignment).map_err(
                        |source| PipelineError::Saliency {
                            id: self.id.to_owned(),
                            source,
                        },
                    )?;
                    out.saliency = Some(aligned);
                }
                ColumnKind::RgbPatch => {
                    let patch = apply_patch(&self.image, spec).map_err(|e| self.image_err(e))?;
                    out.rgb_patch = Some(self.normalized(&patch)?);
                }
                ColumnKind::RgbWarp => {
                    let w = self.warped.as_ref().expect("built in new");
                    out.rgb_warp = Some(w[spec.flip as usize].clone());
                }
            }
        }
        Ok(out)
    }

    /// The centered patch without flip.
    pub fn center_spec(&self) -> PatchSpec {
        PatchSpec {
            top: (self.height() - PATCH_SIZE) / 2,
            left: (self.width() - PATCH_SIZE) / 2,
            size: PATCH_SIZE,
            flip: false,
        }
    }
}
