//! Test-time patch averaging, ranked and argmax metrics, and evaluation reports.

mod report;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use report::{bar_series, format_percent, ranked_classes, relative_improvement, render_json, render_ranked, render_text, BarSeries};

use crate::manifest::StyleTaxonomy;
use crate::model::{ColumnInputs, ColumnKind, Model, ModelError};
use crate::pipeline::{InputConfig, PatchInputs, PipelineError, SampleSource};
use crate::scalar::Real;
use crate::seed::derive_seed;
use crate::transforms::{grid_patches, random_patches, PatchSpec, TransformError, PATCH_SIZE};

/// Patches per test image.
pub const TEST_PATCHES: usize = 50;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no items to score")]
    Empty,
    #[error("average precision needs at least one positive item")]
    NoPositives,
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

/// Which patches a test image is cut into.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchPolicy {
    /// 5×5 grid of positions, each with and without flip.
    #[default]
    Grid,
    /// Seeded random positions and flips, one stream per record.
    Random,
    /// The single centered patch.
    Center,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub test_patches: PatchPolicy,
    /// Patch count for the random policy.
    pub random_count: usize,
    pub seed: u64,
    /// Patches per forward call.
    pub chunk: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            test_patches: PatchPolicy::Grid,
            random_count: TEST_PATCHES,
            seed: 0,
            chunk: 10,
        }
    }
}

/// Anything that maps a batch of patch inputs to class probabilities.
pub trait PatchClassifier<T>: Sync {
    fn columns(&self) -> &[ColumnKind];
    fn num_classes(&self) -> usize;
    /// One probability row per input.
    fn patch_probabilities(&self, inputs: &[ColumnInputs<T>]) -> Result<Array2<T>, ModelError>;
}

impl<T: Real> PatchClassifier<T> for Model<T> {
    fn columns(&self) -> &[ColumnKind] {
        &self.config().columns
    }

    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn patch_probabilities(&self, inputs: &[ColumnInputs<T>]) -> Result<Array2<T>, ModelError> {
        self.predict_proba(inputs)
    }
}

/// Aggregated prediction for one record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub probabilities: Vec<f64>,
    pub truths: Vec<usize>,
}

/// Patch specs for an image of the given (resized) dimensions.
pub fn patch_specs(policy: PatchPolicy, cfg: &PredictConfig, height: usize, width: usize, id: &str) -> Result<Vec<PatchSpec>, EvalError> {
    Ok(match policy {
        PatchPolicy::Grid => grid_patches(height, width, PATCH_SIZE)?,
        PatchPolicy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "test_patches", id, 0));
            random_patches(height, width, PATCH_SIZE, cfg.random_count, &mut rng)?
        }
        PatchPolicy::Center => vec![PatchSpec {
            top: (height - PATCH_SIZE) / 2,
            left: (width - PATCH_SIZE) / 2,
            size: PATCH_SIZE,
            flip: false,
        }],
    })
}

/// Arithmetic mean of the per-patch probability vectors.
pub fn predict_image<T: Real, C: PatchClassifier<T> + ?Sized>(
    clf: &C,
    image: &PatchInputs<'_, T>,
    specs: &[PatchSpec],
    chunk: usize,
) -> Result<Vec<f64>, EvalError> {
    if specs.is_empty() {
        return Err(EvalError::Empty);
    }
    let k = clf.num_classes();
    let mut sum = vec![0.0f64; k];
    for group in specs.chunks(chunk.max(1)) {
        let inputs = group.iter().map(|s| image.inputs(s)).collect::<Result<Vec<_>, _>>()?;
        let probs = clf.patch_probabilities(&inputs)?;
        if probs.dim() != (group.len(), k) {
            return Err(EvalError::Mismatch(format!(
                "classifier returned {:?} for {} patches of {k} classes",
                probs.dim(),
                group.len()
            )));
        }
        for row in probs.rows() {
            for (acc, &p) in sum.iter_mut().zip(row.iter()) {
                *acc += p.as_f64();
            }
        }
    }
    let n = specs.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Predicts one record of `source`.
pub fn predict_record<T: Real, C: PatchClassifier<T> + ?Sized>(
    clf: &C,
    source: &dyn SampleSource<T>,
    index: usize,
    input: &InputConfig,
    cfg: &PredictConfig,
) -> Result<PredictionRecord, EvalError> {
    let id = source.id(index);
    let columns = clf.columns();
    let sample = source.load(index, columns.contains(&ColumnKind::Saliency))?;
    let prepared = PatchInputs::new(id, columns, input, &sample.image, sample.saliency.as_ref())?;
    let specs = patch_specs(cfg.test_patches, cfg, prepared.height(), prepared.width(), id)?;
    Ok(PredictionRecord {
        id: id.to_owned(),
        probabilities: predict_image(clf, &prepared, &specs, cfg.chunk)?,
        truths: source.labels(index).to_vec(),
    })
}

/// Predictions for every record, ordered by id.
pub fn predict_source<T: Real, C: PatchClassifier<T> + ?Sized>(
    clf: &C,
    source: &dyn SampleSource<T>,
    input: &InputConfig,
    cfg: &PredictConfig,
) -> Result<Vec<PredictionRecord>, EvalError> {
    let mut order: Vec<usize> = (0..source.len()).collect();
    order.sort_by(|&a, &b| source.id(a).cmp(source.id(b)));
    order
        .par_iter()
        .map(|&i| predict_record(clf, source, i, input, cfg))
        .collect()
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Ranked-retrieval average precision.
///
/// Items are sorted by descending score, ties kept in input order; the result is the
/// mean over positive items of the precision at their rank.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    if scores.len() != positives.len() {
        return Err(EvalError::Mismatch(format!(
            "{} scores but {} relevance flags",
            scores.len(),
            positives.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(EvalError::NoPositives);
    }
    Ok(total / hits as f64)
}

/// Unweighted mean over the defined entries; `None` when none is defined.
pub fn mean_average_precision(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Row-normalized confusion matrix; rows are true classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub rows: Vec<Vec<f64>>,
    pub support: Vec<usize>,
    /// True classes without test records; their rows are all zero.
    pub zero_support: Vec<usize>,
}

pub fn confusion_matrix(predictions: &[usize], truths: &[usize], classes: usize) -> Result<ConfusionMatrix, EvalError> {
    if predictions.len() != truths.len() {
        return Err(EvalError::Mismatch(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let mut counts = vec![vec![0usize; classes]; classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        if p >= classes || t >= classes {
            return Err(EvalError::Mismatch(format!("class index {} outside 0..{classes}", p.max(t))));
        }
        counts[t][p] += 1;
    }
    let support: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
    let rows = counts
        .iter()
        .zip(&support)
        .map(|(r, &n)| {
            r.iter()
                .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                .collect()
        })
        .collect();
    let zero_support = (0..classes).filter(|&c| support[c] == 0).collect();
    Ok(ConfusionMatrix {
        rows,
        support,
        zero_support,
    })
}

/// Argmax precision per class; `None` for classes never predicted. A prediction is
/// correct when any of the record's true labels matches.
pub fn per_class_precision(predictions: &[usize], truths: &[Vec<usize>], classes: usize) -> Vec<Option<f64>> {
    let mut predicted = vec![0usize; classes];
    let mut correct = vec![0usize; classes];
    for (&p, t) in predictions.iter().zip(truths) {
        if p < classes {
            predicted[p] += 1;
            if t.contains(&p) {
                correct[p] += 1;
            }
        }
    }
    (0..classes)
        .map(|c| (predicted[c] > 0).then(|| correct[c] as f64 / predicted[c] as f64))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    /// Ranked average precision per class; `None` without positives.
    pub average_precision: Vec<Option<f64>>,
    /// Mean of the defined per-class average precisions.
    pub map: Option<f64>,
    /// Argmax precision per class; `None` when never predicted.
    pub per_class_precision: Vec<Option<f64>>,
    pub mean_per_class_precision: Option<f64>,
    /// Top-1 accuracy counting any true label as a hit.
    pub accuracy: f64,
    /// Rows use the first listed label of each record.
    pub confusion: ConfusionMatrix,
    pub samples: usize,
    pub config: serde_json::Value,
}

/// Metrics of a set of predictions, reduced in id order.
pub fn report_from_predictions(
    records: &[PredictionRecord],
    taxonomy: &StyleTaxonomy,
    config: serde_json::Value,
) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let k = taxonomy.len();
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for r in &sorted {
        if r.probabilities.len() != k {
            return Err(EvalError::Mismatch(format!(
                "record {} has {} probabilities for {k} classes",
                r.id,
                r.probabilities.len()
            )));
        }
        if r.truths.is_empty() || r.truths.iter().any(|&t| t >= k) {
            return Err(EvalError::Mismatch(format!("record {} has invalid truths {:?}", r.id, r.truths)));
        }
    }
    let aps: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let scores: Vec<f64> = sorted.iter().map(|r| r.probabilities[c]).collect();
            let pos: Vec<bool> = sorted.iter().map(|r| r.truths.contains(&c)).collect();
            match average_precision(&scores, &pos) {
                Ok(ap) => Ok(Some(ap)),
                Err(EvalError::NoPositives) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_, _>>()?;
    let preds: Vec<usize> = sorted.iter().map(|r| argmax(&r.probabilities)).collect();
    let truth_sets: Vec<Vec<usize>> = sorted.iter().map(|r| r.truths.clone()).collect();
    let first: Vec<usize> = sorted.iter().map(|r| r.truths[0]).collect();
    let pcp = per_class_precision(&preds, &truth_sets, k);
    let hits = preds.iter().zip(&truth_sets).filter(|(p, t)| t.contains(p)).count();
    Ok(EvalReport {
        classes: taxonomy.classes().to_vec(),
        map: mean_average_precision(&aps),
        average_precision: aps,
        mean_per_class_precision: mean_average_precision(&pcp),
        per_class_precision: pcp,
        accuracy: hits as f64 / sorted.len() as f64,
        confusion: confusion_matrix(&preds, &first, k)?,
        samples: sorted.len(),
        config,
    })
}

/// Predicts every record of `source` and computes the report.
pub fn evaluate<T: Real, C: PatchClassifier<T> + ?Sized>(
    clf: &C,
    source: &dyn SampleSource<T>,
    taxonomy: &StyleTaxonomy,
    input: &InputConfig,
    cfg: &PredictConfig,
    config: serde_json::Value,
) -> Result<(EvalReport, Vec<PredictionRecord>), EvalError> {
    if clf.num_classes() != taxonomy.len() {
        return Err(EvalError::Mismatch(format!(
            "classifier has {} classes, taxonomy '{}' has {}",
            clf.num_classes(),
            taxonomy.name(),
            taxonomy.len()
        )));
    }
    let records = predict_source(clf, source, input, cfg)?;
    let report = report_from_predictions(&records, taxonomy, config)?;
    Ok((report, records))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes one JSON object per line.
pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<(), EvalError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("prediction records serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, EvalError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
