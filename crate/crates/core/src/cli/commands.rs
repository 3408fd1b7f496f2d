use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use super::config::{env_overrides, resolve, AppConfig, Overrides};
use super::{Cli, CliError, Command, DataArgs, Format, SplitArg, RESOLVED_CONFIG};
use crate::evaluation::{
    bar_series, evaluate, patch_specs, predict_image, ranked_classes, read_predictions, relative_improvement,
    render_json, render_ranked, render_text, report_from_predictions, write_predictions,
};
use crate::manifest::{
    fetch_remote, split_records, validate_dataset, DataLayout, DatasetManifest, FetchOptions, ImageRecord, Split,
    StyleTaxonomy,
};
use crate::model::{load_checkpoint, read_checkpoint_header, ColumnKind, Model};
use crate::pipeline::{DiskSource, PatchInputs};
use crate::saliency::{self, generate, load_saliency, save_saliency};
use crate::scalar::{Precision, Real};
use crate::training::{fit, FitRequest, BEST_CHECKPOINT, LAST_CHECKPOINT};
use crate::transforms::load_image;

pub(super) fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let mut flags = Overrides::default();
    for s in &cli.set {
        flags.push_assignment(s).map_err(CliError::Usage)?;
    }
    command_overrides(&cli.command, &mut flags);
    let file_text = match &cli.config {
        Some(path) => Some(
            fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?,
        ),
        None => None,
    };
    let mut cfg = resolve(file_text.as_deref(), &env_overrides(), &flags).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    match &cli.command {
        Command::Validate { format, .. } => validate(&cfg, *format),
        Command::Saliency { split, overwrite, .. } => match cfg.data.precision {
            Precision::F32 => saliency_maps::<f32>(&cfg, *split, *overwrite),
            Precision::F64 => saliency_maps::<f64>(&cfg, *split, *overwrite),
        },
        Command::Train { resume, .. } => {
            let taxonomy = StyleTaxonomy::resolve(&cfg.data.taxonomy)?;
            cfg.model.num_classes = taxonomy.len();
            let precision = if *resume {
                checkpoint_precision(&cfg.train.checkpoint_dir.join(LAST_CHECKPOINT))?
            } else {
                cfg.data.precision
            };
            match precision {
                Precision::F32 => train::<f32>(&cfg, &taxonomy, *resume),
                Precision::F64 => train::<f64>(&cfg, &taxonomy, *resume),
            }
        }
        Command::Eval { split, .. } => {
            let path = eval_checkpoint(&cfg);
            match checkpoint_precision(&path)? {
                Precision::F32 => eval::<f32>(&cfg, &path, *split),
                Precision::F64 => eval::<f64>(&cfg, &path, *split),
            }
        }
        Command::Predict {
            image, saliency, format, ..
        } => {
            let path = eval_checkpoint(&cfg);
            match checkpoint_precision(&path)? {
                Precision::F32 => predict::<f32>(&cfg, &path, image, saliency.as_deref(), *format),
                Precision::F64 => predict::<f64>(&cfg, &path, image, saliency.as_deref(), *format),
            }
        }
        Command::Report {
            predictions, baseline, ..
        } => report(&cfg, predictions, baseline.as_deref()),
    }
}

/// Subcommand flags form the highest-precedence layer.
fn command_overrides(command: &Command, o: &mut Overrides) {
    let data = |d: &DataArgs, o: &mut Overrides| {
        if let Some(p) = &d.manifest {
            o.path("data.manifest", p);
        }
        if let Some(t) = &d.taxonomy {
            o.push("data.taxonomy", toml::Value::String(t.clone()));
        }
        if let Some(p) = &d.image_root {
            o.path("data.image_root", p);
        }
        if let Some(p) = &d.saliency_root {
            o.path("data.saliency_root", p);
        }
    };
    let policy = |p: super::PolicyArg| {
        toml::Value::String(
            match p {
                super::PolicyArg::Grid => "grid",
                super::PolicyArg::Random => "random",
                super::PolicyArg::Center => "center",
            }
            .to_owned(),
        )
    };
    match command {
        Command::Validate { data: d, .. } | Command::Saliency { data: d, .. } => data(d, o),
        Command::Train {
            data: d,
            checkpoint_dir,
            epochs,
            seed,
            ..
        } => {
            data(d, o);
            if let Some(p) = checkpoint_dir {
                o.path("train.checkpoint_dir", p);
            }
            if let Some(e) = epochs {
                o.push("train.epochs", toml::Value::Integer(*e as i64));
            }
            if let Some(s) = seed {
                o.push("train.global_seed", toml::Value::Integer(*s as i64));
            }
        }
        Command::Eval {
            data: d,
            checkpoint,
            output_dir,
            patches,
            ..
        } => {
            data(d, o);
            if let Some(p) = checkpoint {
                o.path("eval.checkpoint", p);
            }
            if let Some(p) = output_dir {
                o.path("eval.output_dir", p);
            }
            if let Some(p) = patches {
                o.push("eval.test_patches", policy(*p));
            }
        }
        Command::Predict {
            checkpoint, patches, ..
        } => {
            if let Some(p) = checkpoint {
                o.path("eval.checkpoint", p);
            }
            if let Some(p) = patches {
                o.push("eval.test_patches", policy(*p));
            }
        }
        Command::Report {
            taxonomy, output_dir, ..
        } => {
            if let Some(t) = taxonomy {
                o.push("data.taxonomy", toml::Value::String(t.clone()));
            }
            if let Some(p) = output_dir {
                o.path("eval.output_dir", p);
            }
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn echo_config(cfg: &AppConfig, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    write_file(&dir.join(RESOLVED_CONFIG), &cfg.to_toml())
}

fn eval_checkpoint(cfg: &AppConfig) -> PathBuf {
    cfg.eval
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.train.checkpoint_dir.join(BEST_CHECKPOINT))
}

fn checkpoint_precision(path: &Path) -> Result<Precision, CliError> {
    let header = read_checkpoint_header(path)?;
    Precision::from_dtype(&header.dtype)
        .ok_or_else(|| CliError::Data(format!("{}: unsupported dtype '{}'", path.display(), header.dtype)))
}

struct Dataset {
    taxonomy: StyleTaxonomy,
    manifest: DatasetManifest,
    layout: DataLayout,
}

impl Dataset {
    fn records(&self, split: SplitArg) -> Vec<&ImageRecord> {
        match split {
            SplitArg::Train => split_records(&self.manifest, Split::Train),
            SplitArg::Val => split_records(&self.manifest, Split::Val),
            SplitArg::Test => split_records(&self.manifest, Split::Test),
            SplitArg::All => self.manifest.records.iter().collect(),
        }
    }
}

/// Loads the manifest and taxonomy. With `strict_fetch`, a failed download aborts;
/// otherwise it is logged and left for validation to report.
fn load_dataset(cfg: &AppConfig, strict_fetch: bool) -> Result<Dataset, CliError> {
    let taxonomy = StyleTaxonomy::resolve(&cfg.data.taxonomy)?;
    let path = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::Usage("data.manifest is not set (use --manifest)".to_owned()))?;
    let manifest = DatasetManifest::load(path, &taxonomy)?;
    let mut layout = DataLayout::new(&cfg.data.image_root, cfg.data.saliency_root.clone());
    if let Some(dir) = &cfg.data.cache_dir {
        layout.cache_dir = dir.clone();
    }
    let options = FetchOptions::new(&layout.cache_dir);
    let failures: Vec<CliError> = manifest
        .records
        .par_iter()
        .filter(|r| r.source.is_url())
        .filter_map(|r| fetch_remote(r, &options).err().map(CliError::from))
        .collect();
    if let Some(first) = failures.into_iter().next() {
        if strict_fetch {
            return Err(first);
        }
        log::warn!("{first}");
    }
    Ok(Dataset {
        taxonomy,
        manifest,
        layout,
    })
}

fn validate(cfg: &AppConfig, format: Format) -> Result<(), CliError> {
    let ds = load_dataset(cfg, false)?;
    let report = validate_dataset(&ds.manifest, &ds.layout);
    match format {
        Format::Json => {
            let doc = json!({ "report": report, "config": cfg.to_json() });
            println!("{}", serde_json::to_string_pretty(&doc).expect("report serializes"));
        }
        Format::Text => {
            println!("checked {} records, {} problems", report.checked, report.problems.len());
            for p in &report.problems {
                println!("{}\t{}", p.id, serde_json::to_string(&p.kind).expect("problem serializes"));
            }
        }
    }
    if report.is_empty() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{} records failed validation", report.problems.len())))
    }
}

fn saliency_maps<T: Real>(cfg: &AppConfig, split: SplitArg, overwrite: bool) -> Result<(), CliError> {
    let ds = load_dataset(cfg, true)?;
    let root = ds
        .layout
        .saliency_root
        .clone()
        .ok_or_else(|| CliError::Usage("data.saliency_root is not set (use --saliency-root)".to_owned()))?;
    echo_config(cfg, &root)?;
    let records = ds.records(split);
    let written: Vec<bool> = records
        .par_iter()
        .map(|r| {
            let out = saliency::map_path(&root, &r.id);
            if !overwrite && out.exists() {
                return Ok(false);
            }
            let image = load_image::<T>(&ds.layout.image_path(r))?;
            save_saliency(&generate(&image, &cfg.saliency)?, &out)?;
            Ok(true)
        })
        .collect::<Result<_, CliError>>()?;
    let n = written.iter().filter(|&&w| w).count();
    println!("wrote {n} saliency maps, kept {} existing", records.len() - n);
    Ok(())
}

fn train<T: Real>(cfg: &AppConfig, taxonomy: &StyleTaxonomy, resume: bool) -> Result<(), CliError> {
    let mut ds = load_dataset(cfg, true)?;
    ds.taxonomy = taxonomy.clone();
    let moved = ds.manifest.derive_val_split(cfg.data.val_fraction);
    if moved > 0 {
        log::info!("held out {moved} train records for validation");
    }
    let train_source = DiskSource::new(&ds.records(SplitArg::Train), &ds.taxonomy, &ds.layout)?;
    let val_source = DiskSource::new(&ds.records(SplitArg::Val), &ds.taxonomy, &ds.layout)?;
    echo_config(cfg, &cfg.train.checkpoint_dir)?;
    let out = fit::<T>(FitRequest {
        model: cfg.model.clone(),
        train: &train_source,
        val: Some(&val_source),
        taxonomy: &ds.taxonomy,
        train_config: &cfg.train,
        input: &cfg.train_input(),
        config_echo: cfg.to_json(),
        resume: resume.then(|| cfg.train.checkpoint_dir.join(LAST_CHECKPOINT)),
    })?;
    println!(
        "trained {} epochs ({} steps){}",
        out.state.epoch,
        out.state.step,
        if out.stopped_early { ", stopped early" } else { "" }
    );
    if let Some(map) = out.state.best_val_map {
        println!("best val MAP {:.4} at epoch {}", map, out.state.best_epoch.unwrap_or(0));
    }
    println!("best checkpoint: {}", out.best_checkpoint.display());
    println!("last checkpoint: {}", out.last_checkpoint.display());
    Ok(())
}

fn write_reports(
    dir: &Path,
    report: &crate::evaluation::EvalReport,
    baseline: Option<&crate::evaluation::EvalReport>,
) -> Result<(), CliError> {
    write_file(&dir.join("report.txt"), &render_text(report))?;
    write_file(&dir.join("report.json"), &render_json(report))?;
    let mut bars = bar_series(report);
    if let Some(b) = baseline {
        bars.push(relative_improvement(b, report));
    }
    write_file(
        &dir.join("bars.json"),
        &serde_json::to_string_pretty(&bars).expect("bar series serialize"),
    )
}

fn eval<T: Real>(cfg: &AppConfig, checkpoint: &Path, split: SplitArg) -> Result<(), CliError> {
    let ds = load_dataset(cfg, true)?;
    let ck = load_checkpoint::<T>(checkpoint, Some(&ds.taxonomy))?;
    let source = DiskSource::new(&ds.records(split), &ds.taxonomy, &ds.layout)?;
    let (report, records) = evaluate(
        &ck.model,
        &source,
        &ds.taxonomy,
        &cfg.eval_input(),
        &cfg.predict_config(),
        cfg.to_json(),
    )?;
    let dir = &cfg.eval.output_dir;
    echo_config(cfg, dir)?;
    write_predictions(&dir.join("predictions.jsonl"), &records)?;
    write_reports(dir, &report, None)?;
    print!("{}", render_text(&report));
    Ok(())
}

fn predict<T: Real>(
    cfg: &AppConfig,
    checkpoint: &Path,
    image_path: &Path,
    saliency_path: Option<&Path>,
    format: Format,
) -> Result<(), CliError> {
    let ck = load_checkpoint::<T>(checkpoint, None)?;
    let model: &Model<T> = &ck.model;
    let image = load_image::<T>(image_path)?;
    let map = if model.config().has(ColumnKind::Saliency) {
        Some(match saliency_path {
            Some(p) => load_saliency::<T>(p)?,
            None => generate(&image, &cfg.saliency)?,
        })
    } else {
        None
    };
    let id = image_path
        .file_stem()
        .map_or_else(|| "image".to_owned(), |s| s.to_string_lossy().into_owned());
    let columns = model.config().columns.clone();
    let input = cfg.eval_input();
    let prepared = PatchInputs::new(&id, &columns, &input, &image, map.as_ref())?;
    let pcfg = cfg.predict_config();
    let specs = patch_specs(pcfg.test_patches, &pcfg, prepared.height(), prepared.width(), &id)?;
    let probs = predict_image(model, &prepared, &specs, pcfg.chunk)?;
    let ranked = ranked_classes(&probs, &ck.taxonomy);
    match format {
        Format::Text => print!("{}", render_ranked(&ranked)),
        Format::Json => {
            let classes: Vec<_> = ranked.iter().map(|(c, p)| json!({ "class": c, "probability": p })).collect();
            let doc = json!({ "image": image_path, "classes": classes, "config": cfg.to_json() });
            println!("{}", serde_json::to_string_pretty(&doc).expect("prediction serializes"));
        }
    }
    Ok(())
}

fn report(cfg: &AppConfig, predictions: &Path, baseline: Option<&Path>) -> Result<(), CliError> {
    let taxonomy = StyleTaxonomy::resolve(&cfg.data.taxonomy)?;
    let current = report_from_predictions(&read_predictions(predictions)?, &taxonomy, cfg.to_json())?;
    let base = match baseline {
        Some(p) => Some(report_from_predictions(&read_predictions(p)?, &taxonomy, cfg.to_json())?),
        None => None,
    };
    let dir = &cfg.eval.output_dir;
    echo_config(cfg, dir)?;
    write_reports(dir, &current, base.as_ref())?;
    print!("{}", render_text(&current));
    if let Some(b) = &base {
        let rel = relative_improvement(b, &current);
        if let Some(Some(overall)) = rel.values.last() {
            println!("relative MAP improvement over baseline: {overall:.2}%");
        }
    }
    Ok(())
}
