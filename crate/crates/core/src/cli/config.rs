//! Layered application config: defaults < config file < environment < flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::evaluation::{PatchPolicy, PredictConfig, TEST_PATCHES};
use crate::model::ModelConfig;
use crate::pipeline::InputConfig;
use crate::saliency::SaliencyParams;
use crate::scalar::Precision;
use crate::training::TrainConfig;

/// Overrides `data.cache_dir`.
pub const CACHE_DIR_ENV: &str = "SALRGB_CACHE_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    /// `ava14` or a path to a class-list file.
    pub taxonomy: String,
    pub image_root: PathBuf,
    pub saliency_root: Option<PathBuf>,
    /// Download cache for URL sources; `<image_root>/.cache` when unset.
    pub cache_dir: Option<PathBuf>,
    /// Share of the train pool held out when the manifest has no val records.
    pub val_fraction: f64,
    pub precision: Precision,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        let input = InputConfig::default();
        DataConfig {
            manifest: None,
            taxonomy: "ava14".to_owned(),
            image_root: PathBuf::from("."),
            saliency_root: None,
            cache_dir: None,
            val_fraction: 0.1,
            precision: Precision::F32,
            mean: input.mean,
            std: input.std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub test_patches: PatchPolicy,
    pub random_count: usize,
    pub seed: u64,
    pub resize_short: usize,
    /// Patches per forward call.
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: None,
            output_dir: PathBuf::from("eval"),
            test_patches: PatchPolicy::Grid,
            random_count: TEST_PATCHES,
            seed: 0,
            resize_short: 256,
            chunk: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub data: DataConfig,
    pub saliency: SaliencyParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl AppConfig {
    /// Input handling for evaluation and prediction.
    pub fn eval_input(&self) -> InputConfig {
        InputConfig {
            resize_short: self.eval.resize_short,
            mean: self.data.mean,
            std: self.data.std,
            alignment: self.saliency.alignment,
        }
    }

    /// Input handling for training (the crop comes from the augmentation section).
    pub fn train_input(&self) -> InputConfig {
        InputConfig {
            resize_short: self.train.augmentation.resize_short,
            ..self.eval_input()
        }
    }

    pub fn predict_config(&self) -> PredictConfig {
        PredictConfig {
            test_patches: self.eval.test_patches,
            random_count: self.eval.random_count,
            seed: self.eval.seed,
            chunk: self.eval.chunk,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes to JSON")
    }
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Parses the right-hand side of `key=value`; bare words become strings.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("invalid config key '{key}'"));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| format!("config key '{key}' does not name a section"))?;
        node = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| format!("config key '{key}' does not name a section"))?
        .insert(parts[parts.len() - 1].to_owned(), value);
    Ok(())
}

/// One layer of `section.key = value` settings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides(pub Vec<(String, toml::Value)>);

impl Overrides {
    pub fn push(&mut self, key: &str, value: toml::Value) {
        self.0.push((key.to_owned(), value));
    }

    pub fn path(&mut self, key: &str, value: &Path) {
        self.push(key, toml::Value::String(value.display().to_string()));
    }

    /// Parses `key=value`.
    pub fn push_assignment(&mut self, assignment: &str) -> Result<(), String> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| format!("expected KEY=VALUE, got '{assignment}'"))?;
        self.push(k.trim(), parse_value(v.trim()));
        Ok(())
    }
}

/// Resolves the config from its layers; unknown keys are rejected.
pub fn resolve(file_text: Option<&str>, env: &Overrides, flags: &Overrides) -> Result<AppConfig, String> {
    let mut value = toml::Value::try_from(AppConfig::default()).map_err(|e| e.to_string())?;
    if let Some(text) = file_text {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
        merge(&mut value, toml::Value::Table(file));
    }
    for layer in [env, flags] {
        for (k, v) in &layer.0 {
            set_path(&mut value, k, v.clone())?;
        }
    }
    value.try_into::<AppConfig>().map_err(|e| e.to_string())
}

/// Environment layer.
pub fn env_overrides() -> Overrides {
    let mut o = Overrides::default();
    if let Some(dir) = std::env::var_os(CACHE_DIR_ENV) {
        o.path("data.cache_dir", Path::new(&dir));
    }
    o
}
