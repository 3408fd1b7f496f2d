//! End-to-end runs of the `salrgb` binary on a small on-disk fixture.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use salrgb::manifest::StyleTaxonomy;
use salrgb::model::{save_checkpoint, Checkpoint, ColumnKind, Model, ModelConfig};
use salrgb::saliency::{map_path, save_saliency, SaliencyMap};

fn salrgb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_salrgb"))
        .args(args)
        .env_remove("SALRGB_CACHE_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn path(&self, rel: &str) -> String {
        self.root.join(rel).display().to_string()
    }

    fn data_args(&self) -> Vec<String> {
        vec![
            "--manifest".into(),
            self.path("manifest.jsonl"),
            "--image-root".into(),
            self.path("images"),
            "--saliency-root".into(),
            self.path("saliency"),
        ]
    }
}

/// Eight small images with ava14 labels, optionally with saliency maps.
fn fixture(with_maps: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    fs::create_dir_all(root.join("images")).unwrap();
    let classes = StyleTaxonomy::ava14().classes().to_vec();
    let mut manifest = String::new();
    for i in 0..8 {
        let (w, h) = (48 + 8 * (i % 3) as u32, 40);
        let img = image::RgbImage::from_fn(w, h, |x, y| {
            let v = ((x * 5 + y * 3 + i as u32 * 17) % 256) as u8;
            image::Rgb([v, 255 - v, (v / 2).wrapping_add(i as u8 * 20)])
        });
        img.save(root.join(format!("images/p{i}.png"))).unwrap();
        let split = match i {
            0..=3 => "train",
            4 | 5 => "val",
            _ => "test",
        };
        let labels = if i == 7 {
            format!("[\"{}\", \"{}\"]", classes[1], classes[2])
        } else {
            format!("[\"{}\"]", classes[i % 3])
        };
        manifest.push_str(&format!(
            "{{\"id\": \"p{i}\", \"source\": \"p{i}.png\", \"split\": \"{split}\", \"labels\": {labels}, \"width\": {w}, \"height\": {h}}}\n"
        ));
        if with_maps {
            let map = SaliencyMap::<f32>::from_fn(h as usize, w as usize, |y, x| ((x + y + i) % 7) as f32 / 6.0);
            save_saliency(&map, &map_path(&root.join("saliency"), &format!("p{i}"))).unwrap();
        }
    }
    fs::write(root.join("manifest.jsonl"), manifest).unwrap();
    Fixture { _dir: dir, root }
}

fn stub_checkpoint(path: &Path) {
    let model = Model::<f64>::new(ModelConfig {
        columns: vec![ColumnKind::Saliency],
        fusion_dim: 8,
        num_classes: 14,
        init_seed: 3,
        ..ModelConfig::default()
    })
    .unwrap();
    let ck = Checkpoint {
        model,
        taxonomy: StyleTaxonomy::ava14(),
        step: 0,
        train_state: serde_json::Value::Null,
        config_echo: serde_json::Value::Null,
        momentum: Vec::new(),
    };
    save_checkpoint(path, &ck).unwrap();
}

#[test]
fn help_exits_zero() {
    let o = salrgb(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for sub in ["validate", "saliency", "train", "eval", "predict", "report"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = salrgb(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let f = fixture(true);
    let mut args = vec!["validate".to_owned(), "--set".into(), "data.nonsense=1".into()];
    args.extend(f.data_args());
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(salrgb(&args).status.code(), Some(2));
}

#[test]
fn validate_complete_fixture() {
    let f = fixture(true);
    let mut args = vec!["validate".to_owned()];
    args.extend(f.data_args());
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = salrgb(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("checked 8 records, 0 problems"));
}

#[test]
fn saliency_command_completes_a_fixture_without_maps() {
    let f = fixture(false);
    let mut validate = vec!["validate".to_owned(), "--format".into(), "json".into()];
    validate.extend(f.data_args());
    let validate: Vec<&str> = validate.iter().map(String::as_str).collect();
    let o = salrgb(&validate);
    assert_eq!(o.status.code(), Some(3));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(doc["report"]["problems"].as_array().unwrap().len(), 8);

    let mut gen = vec!["saliency".to_owned()];
    gen.extend(f.data_args());
    let gen: Vec<&str> = gen.iter().map(String::as_str).collect();
    let o = salrgb(&gen);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("wrote 8 saliency maps"));
    assert!(f.root.join("saliency/resolved_config.toml").exists());
    assert_eq!(salrgb(&validate).status.code(), Some(0));
    // existing maps are kept
    assert!(stdout(&salrgb(&gen)).contains("wrote 0 saliency maps"));
}

#[test]
fn predict_with_stub_checkpoint_ranks_fourteen_classes() {
    let f = fixture(true);
    let ck = f.root.join("stub.ckpt");
    stub_checkpoint(&ck);
    let image = f.path("images/p3.png");
    let ck = ck.display().to_string();
    for extra in [vec![], vec!["--saliency".to_owned(), f.path("saliency/p3.png")]] {
        let mut args = vec!["predict".to_owned(), image.clone(), "--checkpoint".into(), ck.clone()];
        args.extend(extra);
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = salrgb(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let text = stdout(&o);
        let probs: Vec<f64> = text
            .lines()
            .map(|l| l.rsplit('\t').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(probs.len(), 14);
        assert!(probs.windows(2).all(|w| w[0] >= w[1]), "not descending: {probs:?}");
        assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        let names: Vec<&str> = text.lines().map(|l| l.split('\t').next().unwrap()).collect();
        for c in StyleTaxonomy::ava14().classes() {
            assert!(names.contains(&c.as_str()));
        }
    }
}

#[test]
fn train_eval_report_round_trip() {
    let f = fixture(true);
    let ckdir = f.path("run/ck");
    let mut train = vec![
        "train".to_owned(),
        "--checkpoint-dir".into(),
        ckdir.clone(),
        "--epochs".into(),
        "2".into(),
        "--jobs".into(),
        "2".into(),
    ];
    for s in [
        "model.columns=[\"saliency\"]",
        "model.fusion_dim=8",
        "train.batch_size=2",
        "train.augmentation.resize_short=224",
    ] {
        train.push("--set".into());
        train.push(s.into());
    }
    train.extend(f.data_args());
    let train: Vec<&str> = train.iter().map(String::as_str).collect();
    let o = salrgb(&train);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckdir = PathBuf::from(ckdir);
    for file in ["best.ckpt", "last.ckpt", "train_log.jsonl", "resolved_config.toml"] {
        assert!(ckdir.join(file).exists(), "missing {file}");
    }
    assert_eq!(fs::read_to_string(ckdir.join("train_log.jsonl")).unwrap().lines().count(), 2);

    let eval = |out: &str, config: Option<&str>| {
        let mut args = vec!["eval".to_owned(), "--output-dir".into(), out.to_owned()];
        match config {
            Some(c) => args.extend(["--config".to_owned(), c.to_owned()]),
            None => {
                args.extend(["--checkpoint".to_owned(), ckdir.join("best.ckpt").display().to_string()]);
                args.extend(f.data_args());
            }
        }
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        salrgb(&args)
    };
    let out1 = f.path("run/eval1");
    let o = eval(&out1, None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("MAP"));
    for file in ["predictions.jsonl", "report.txt", "report.json", "bars.json", "resolved_config.toml"] {
        assert!(Path::new(&out1).join(file).exists(), "missing {file}");
    }
    // re-running from the echoed config reproduces the predictions
    let out2 = f.path("run/eval2");
    let echoed = format!("{out1}/resolved_config.toml");
    let o = eval(&out2, Some(&echoed));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let preds1 = fs::read_to_string(format!("{out1}/predictions.jsonl")).unwrap();
    assert_eq!(preds1, fs::read_to_string(format!("{out2}/predictions.jsonl")).unwrap());
    assert_eq!(preds1.lines().count(), 2);

    let out3 = f.path("run/report");
    let preds = format!("{out1}/predictions.jsonl");
    let o = salrgb(&["report", &preds, "--baseline", &preds, "--output-dir", &out3]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("relative MAP improvement over baseline: 0.00%"));
    let bars: serde_json::Value = serde_json::from_str(&fs::read_to_string(format!("{out3}/bars.json")).unwrap()).unwrap();
    assert!(bars.as_array().unwrap().iter().any(|b| b["name"] == "relative_ap_improvement"));
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let f = fixture(true);
    let o = salrgb(&["predict", &f.path("images/p0.png"), "--checkpoint", &f.path("nope.ckpt")]);
    assert_eq!(o.status.code(), Some(3));
}
