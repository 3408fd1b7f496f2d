//! Versioned checkpoint files.
//!
//! Layout: the 8-byte magic `SALRGBCK`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header, then every array as
//! little-endian `f64` values in header order. Optimizer momentum is stored as extra
//! arrays named `momentum/<parameter>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError};
use crate::manifest::StyleTaxonomy;
use crate::scalar::Real;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SALRGBCK";
const MOMENTUM_PREFIX: &str = "momentum/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    pub model: ModelConfig,
    pub taxonomy: StyleTaxonomy,
    /// Number of completed optimizer steps.
    pub step: u64,
    /// Trainer bookkeeping (epoch, best score, patience counter, ...).
    pub train_state: serde_json::Value,
    /// Resolved configuration that produced this checkpoint.
    pub config_echo: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub taxonomy: StyleTaxonomy,
    pub step: u64,
    pub train_state: serde_json::Value,
    pub config_echo: serde_json::Value,
    /// Momentum buffers keyed by parameter name.
    pub momentum: Vec<(String, Vec<T>)>,
}

fn ck_err(path: &Path, message: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Writes `ckpt` to `path` atomically (temporary file in the same directory, then rename).
pub fn save_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<(), ModelError> {
    let mut arrays = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>, values: &[T], arrays: &mut Vec<ArrayEntry>| {
        for v in values {
            blob.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        arrays.push(ArrayEntry {
            name,
            shape,
            offset,
            len: values.len(),
        });
        offset += values.len();
    };
    for p in ckpt.model.parameters() {
        push(p.name, p.shape, p.values, &mut arrays);
    }
    for (name, values) in &ckpt.momentum {
        push(format!("{MOMENTUM_PREFIX}{name}"), vec![values.len()], values, &mut arrays);
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_owned(),
        model: ckpt.model.config().clone(),
        taxonomy: ckpt.taxonomy.clone(),
        step: ckpt.step,
        train_state: ckpt.train_state.clone(),
        config_echo: ckpt.config_echo.clone(),
        arrays,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| ck_err(path, e.to_string()))?;

    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let io = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    {
        let f = tmp.as_file_mut();
        f.write_all(MAGIC).map_err(io)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        f.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(io)?;
        f.write_all(&header_json).map_err(io)?;
        f.write_all(&blob).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn split_file<'a>(path: &Path, bytes: &'a [u8]) -> Result<(CheckpointHeader, &'a [u8]), ModelError> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ck_err(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ModelError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(ck_err(path, "truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| ck_err(path, format!("bad header: {e}")))?;
    if header.format_version != version {
        return Err(ck_err(path, "header version disagrees with file version"));
    }
    Ok((header, &body[hlen..]))
}

/// Reads only the header, e.g. to learn the stored dtype before choosing `T`.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    split_file(path, &bytes).map(|(h, _)| h)
}

/// Loads a checkpoint. The stored dtype must equal `T`; when `expected_taxonomy` is
/// given its class list must match the stored one.
pub fn load_checkpoint<T: Real>(path: &Path, expected_taxonomy: Option<&StyleTaxonomy>) -> Result<Checkpoint<T>, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let (header, blob) = split_file(path, &bytes)?;
    if header.dtype != T::DTYPE {
        return Err(ck_err(
            path,
            format!("stored dtype {} cannot be loaded as {}", header.dtype, T::DTYPE),
        ));
    }
    if let Some(tax) = expected_taxonomy {
        if tax.classes() != header.taxonomy.classes() {
            return Err(ck_err(
                path,
                format!(
                    "taxonomy '{}' does not match checkpoint taxonomy '{}'",
                    tax.name(),
                    header.taxonomy.name()
                ),
            ));
        }
    }
    if header.model.num_classes != header.taxonomy.len() {
        return Err(ck_err(path, "model class count disagrees with taxonomy"));
    }
    let total: usize = header.arrays.iter().map(|a| a.len).sum();
    if blob.len() != total * 8 {
        return Err(ck_err(path, format!("expected {} data bytes, found {}", total * 8, blob.len())));
    }
    let read = |a: &ArrayEntry| -> Result<Vec<T>, ModelError> {
        if a.offset + a.len > total || a.shape.iter().product::<usize>() != a.len {
            return Err(ck_err(path, format!("array '{}' has an inconsistent extent", a.name)));
        }
        Ok(blob[a.offset * 8..(a.offset + a.len) * 8]
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    };

    let mut model = Model::<T>::new(header.model.clone())?;
    let expected: Vec<(String, Vec<usize>)> = model.parameters().into_iter().map(|p| (p.name, p.shape)).collect();
    for (name, shape) in &expected {
        let entry = header
            .arrays
            .iter()
            .find(|a| &a.name == name)
            .ok_or_else(|| ck_err(path, format!("missing parameter '{name}'")))?;
        if &entry.shape != shape {
            return Err(ck_err(
                path,
                format!("parameter '{name}' has shape {:?}, model expects {shape:?}", entry.shape),
            ));
        }
        model.set_parameter(name, &read(entry)?)?;
    }
    let mut momentum = Vec::new();
    for a in &header.arrays {
        if let Some(name) = a.name.strip_prefix(MOMENTUM_PREFIX) {
            momentum.push((name.to_owned(), read(a)?));
        } else if !expected.iter().any(|(n, _)| n == &a.name) {
            return Err(ck_err(path, format!("unexpected array '{}'", a.name)));
        }
    }
    Ok(Checkpoint {
        model,
        taxonomy: header.taxonomy,
        step: header.step,
        train_state: header.train_state,
        config_echo: header.config_echo,
        momentum,
    })
}
