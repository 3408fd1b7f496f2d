//! Style taxonomies and dataset manifests.
//!
//! A manifest is UTF-8 text with one JSON object per line:
//!
//! ```text
//! {"id":"a001","source":"images/a001.jpg","split":"train","labels":["Macro"]}
//! {"id":"t017","source":"https://example.org/t017.jpg","split":"test","labels":["HDR","Macro"]}
//! ```
//!
//! Train and val records carry exactly one label; test records may carry several.

mod fetch;
mod taxonomy;
mod validate;

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use fetch::{cache_path, fetch_remote, FetchError, FetchOptions};
pub use taxonomy::StyleTaxonomy;
pub use validate::{validate_dataset, DataLayout, Problem, ProblemKind, ValidationReport};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown label '{label}' for taxonomy '{taxonomy}'")]
    UnknownLabel {
        line: usize,
        label: String,
        taxonomy: String,
    },
    #[error("line {line}: duplicate record id '{id}'")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: {split} record '{id}' must carry exactly one label, found {count}")]
    LabelCount {
        line: usize,
        id: String,
        split: Split,
        count: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn single_label(self) -> bool {
        !matches!(self, Split::Test)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}' (expected train, val or test)")),
        }
    }
}

/// Where the image bytes live.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Source {
    Local(PathBuf),
    Url(String),
}

impl Source {
    pub fn is_url(&self) -> bool {
        matches!(self, Source::Url(_))
    }
}

impl From<String> for Source {
    fn from(s: String) -> Self {
        if s.starts_with("http://") || s.starts_with("https://") {
            Source::Url(s)
        } else {
            Source::Local(PathBuf::from(s))
        }
    }
}

impl From<Source> for String {
    fn from(s: Source) -> Self {
        match s {
            Source::Local(p) => p.to_string_lossy().into_owned(),
            Source::Url(u) => u,
        }
    }
}

/// One corpus entry. `id` doubles as the saliency-map file stem.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    pub source: Source,
    pub split: Split,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

impl ImageRecord {
    /// Class indices of the labels, in listed order.
    pub fn label_indices(&self, taxonomy: &StyleTaxonomy) -> Vec<usize> {
        self.labels
            .iter()
            .map(|l| taxonomy.index_of(l).expect("labels validated against taxonomy"))
            .collect()
    }

    /// First listed label; the single truth used for single-label metrics.
    pub fn primary_label(&self, taxonomy: &StyleTaxonomy) -> usize {
        taxonomy
            .index_of(&self.labels[0])
            .expect("labels validated against taxonomy")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub taxonomy: StyleTaxonomy,
    pub records: Vec<ImageRecord>,
}

/// Parses and validates a line-delimited manifest against `taxonomy`.
pub fn parse_manifest(text: &str, taxonomy: &StyleTaxonomy) -> Result<DatasetManifest, ManifestError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: ImageRecord = serde_json::from_str(raw).map_err(|e| ManifestError::Malformed {
            line,
            message: e.to_string(),
        })?;
        if record.id.is_empty() {
            return Err(ManifestError::Malformed {
                line,
                message: "empty id".into(),
            });
        }
        if record.labels.is_empty() || (record.split.single_label() && record.labels.len() != 1) {
            return Err(ManifestError::LabelCount {
                line,
                id: record.id,
                split: record.split,
                count: record.labels.len(),
            });
        }
        if let Some(label) = record.labels.iter().find(|l| taxonomy.index_of(l).is_none()) {
            return Err(ManifestError::UnknownLabel {
                line,
                label: label.clone(),
                taxonomy: taxonomy.name().to_owned(),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(ManifestError::DuplicateId { line, id: record.id });
        }
        records.push(record);
    }
    Ok(DatasetManifest {
        taxonomy: taxonomy.clone(),
        records,
    })
}

/// Inverse of [`parse_manifest`].
pub fn serialize_manifest(manifest: &DatasetManifest) -> String {
    let mut out = String::new();
    for r in &manifest.records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

impl DatasetManifest {
    pub fn load(path: &std::path::Path, taxonomy: &StyleTaxonomy) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|e| ManifestError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        parse_manifest(&text, taxonomy)
    }

    /// Moves roughly `fraction` of the train records to val, chosen by a hash of the id.
    ///
    /// Does nothing when the manifest already has val records. Returns the number moved.
    pub fn derive_val_split(&mut self, fraction: f64) -> usize {
        if self.records.iter().any(|r| r.split == Split::Val) {
            return 0;
        }
        let mut moved = 0;
        for r in self.records.iter_mut().filter(|r| r.split == Split::Train) {
            if id_bucket(&r.id) < fraction {
                r.split = Split::Val;
                moved += 1;
            }
        }
        moved
    }
}

/// Deterministic position of an id in [0, 1).
fn id_bucket(id: &str) -> f64 {
    let digest = Sha256::digest(id.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
}

/// Records of one split, in manifest order.
pub fn split_records(manifest: &DatasetManifest, split: Split) -> Vec<&ImageRecord> {
    manifest.records.iter().filter(|r| r.split == split).collect()
}

/// Label occurrence counts for one split, in taxonomy order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub classes: Vec<String>,
    pub counts: Vec<usize>,
}

impl ClassHistogram {
    pub fn get(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class).map(|i| self.counts[i])
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Multi-label records contribute once per listed label.
pub fn class_histogram(manifest: &DatasetManifest, split: Split) -> ClassHistogram {
    let mut counts = vec![0; manifest.taxonomy.len()];
    for r in split_records(manifest, split) {
        for idx in r.label_indices(&manifest.taxonomy) {
            counts[idx] += 1;
        }
    }
    ClassHistogram {
        classes: manifest.taxonomy.classes().to_vec(),
        counts,
    }
}
