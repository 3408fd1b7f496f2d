use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fetch::cache_path;
use super::{DatasetManifest, ImageRecord, Source};
use crate::saliency::{self, SaliencyError};
use crate::transforms;

/// Where the files of a manifest live on disk.
#[derive(Clone, Debug)]
pub struct DataLayout {
    /// Base for relative local sources.
    pub image_root: PathBuf,
    /// Directory of `<id>.png` saliency maps; `None` skips saliency checks.
    pub saliency_root: Option<PathBuf>,
    /// Download cache for URL sources.
    pub cache_dir: PathBuf,
}

impl DataLayout {
    pub fn new(image_root: impl Into<PathBuf>, saliency_root: Option<PathBuf>) -> Self {
        let image_root = image_root.into();
        DataLayout {
            cache_dir: image_root.join(".cache"),
            image_root,
            saliency_root,
        }
    }

    /// Local path of a record's image (for URL sources, its cache location).
    pub fn image_path(&self, record: &ImageRecord) -> PathBuf {
        match &record.source {
            Source::Local(p) if p.is_absolute() => p.clone(),
            Source::Local(p) => self.image_root.join(p),
            Source::Url(url) => cache_path(&record.id, url, &self.cache_dir),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemKind {
    MissingImage { path: PathBuf },
    UndecodableImage { path: PathBuf, message: String },
    ImageSizeMismatch { declared: (u32, u32), actual: (usize, usize) },
    MissingSaliency { path: PathBuf },
    InvalidSaliency { path: PathBuf, message: String },
    SaliencySizeMismatch { image: (usize, usize), map: (usize, usize) },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    #[serde(flatten)]
    pub kind: ProblemKind,
}

/// Problems sorted by record id; empty iff every record is usable for training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checked: usize,
    pub problems: Vec<Problem>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Checks that every image decodes and that its saliency map exists, is single-channel
/// and has the image's aspect ratio (within 1%).
pub fn validate_dataset(manifest: &DatasetManifest, layout: &DataLayout) -> ValidationReport {
    let mut problems: Vec<Problem> = manifest
        .records
        .par_iter()
        .flat_map_iter(|r| check_record(r, layout))
        .collect();
    problems.sort_by(|a, b| a.id.cmp(&b.id));
    ValidationReport {
        checked: manifest.records.len(),
        problems,
    }
}

fn check_record(record: &ImageRecord, layout: &DataLayout) -> Vec<Problem> {
    let mut out = Vec::new();
    let problem = |kind| Problem {
        id: record.id.clone(),
        kind,
    };
    let path = layout.image_path(record);
    let dims = if !path.is_file() {
        out.push(problem(ProblemKind::MissingImage { path: path.clone() }));
        None
    } else {
        match image_dimensions(&path) {
            Ok(d) => Some(d),
            Err(message) => {
                out.push(problem(ProblemKind::UndecodableImage { path: path.clone(), message }));
                None
            }
        }
    };
    if let (Some((h, w)), Some(dw), Some(dh)) = (dims, record.width, record.height) {
        if (dh as usize, dw as usize) != (h, w) {
            out.push(problem(ProblemKind::ImageSizeMismatch {
                declared: (dw, dh),
                actual: (w, h),
            }));
        }
    }
    if let Some(root) = &layout.saliency_root {
        let map_path = saliency::map_path(root, &record.id);
        match saliency::load_saliency::<f32>(&map_path) {
            Err(SaliencyError::Missing { path }) => out.push(problem(ProblemKind::MissingSaliency { path })),
            Err(e) => out.push(problem(ProblemKind::InvalidSaliency {
                path: map_path,
                message: e.to_string(),
            })),
            Ok(map) => {
                if let Some((h, w)) = dims {
                    let aspect_img = w as f64 / h as f64;
                    let aspect_map = map.width() as f64 / map.height() as f64;
                    if (aspect_img / aspect_map - 1.0).abs() > 0.01 {
                        out.push(problem(ProblemKind::SaliencySizeMismatch {
                            image: (h, w),
                            map: (map.height(), map.width()),
                        }));
                    }
                }
            }
        }
    }
    out
}

/// Fully decodes the image so truncated files are caught.
fn image_dimensions(path: &Path) -> Result<(usize, usize), String> {
    transforms::load_image::<f32>(path)
        .map(|g| (g.height(), g.width()))
        .map_err(|e| e.to_string())
}
