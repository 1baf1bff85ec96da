use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use obda::commands;
use obda::config::{DataSource, ExperimentConfig};
use obda_core::datasets::{ingest_xbd, SyntheticSceneSpec};
use obda_core::fusion::VariantConfig;
use obda_core::geometry::Raster;
use obda_core::geoproto::SweepSpec;
use obda_core::model::ModelConfig;
use obda_core::train::TrainConfig;
use serde_json::Value;

fn experiment(dir: &Path, count: usize, steps: usize) -> ExperimentConfig {
    ExperimentConfig {
        name: "cli-test".into(),
        model: ModelConfig::toy(VariantConfig::siamese().with_attention(&[obda_core::encoder::Level::D5]).with_compression(8)),
        train: TrainConfig { steps, warmup_steps: 5, ..TrainConfig::default() },
        data: DataSource::Synthetic { spec: SyntheticSceneSpec::default(), count, first_seed: 0, fractions: [0.5, 0.25, 0.25], split_seed: 3 },
        seed: 0,
        output_dir: dir.join("run"),
        eval: Default::default(),
        sweep: SweepSpec::new(vec![0, 16]),
        budget: Default::default(),
    }
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join("experiment.json");
    commands::write_json(&p, cfg).unwrap();
    p
}

fn obda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_obda")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes_by_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    // unknown flag: usage is an input error
    assert_eq!(code(&obda(&["train", "--bogus"])), 2);
    // missing config file
    assert_eq!(code(&obda(&["train", "--config", s(&dir.path().join("absent.json"))])), 3);
    // malformed JSON
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&obda(&["eval", "--config", s(&bad)])), 3);
    // semantically invalid config
    let mut cfg = experiment(dir.path(), 8, 1);
    cfg.train.learning_rate = -1.0;
    let p = write_config(dir.path(), &cfg);
    assert_eq!(code(&obda(&["train", "--config", s(&p)])), 3);
    // valid config, missing input image
    let cfg = experiment(dir.path(), 8, 1);
    let p = write_config(dir.path(), &cfg);
    let run = obda(&["train", "--config", s(&p)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let out = obda(&["encode-latent", "--config", s(&p), "--pre", s(&dir.path().join("nope.png")), "--output", s(&dir.path().join("x.olp"))]);
    assert_eq!(code(&out), 2);
    // budget that overflows exact arithmetic
    let budget = dir.path().join("budget.json");
    std::fs::write(&budget, r#"{"area_km2": "1e30", "gsd_m_per_px": "0.000001"}"#).unwrap();
    let out = obda(&["budget", "--config", s(&budget)]);
    assert!([3, 4].contains(&code(&out)), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn checkpoint_from_another_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(dir.path(), 8, 2);
    let p = write_config(dir.path(), &cfg);
    assert_eq!(code(&obda(&["train", "--config", s(&p)])), 0);
    // same output directory, different seed: a different config hash
    assert_eq!(code(&obda(&["eval", "--config", s(&p), "--seed", "5"])), 5);
    // corrupted weights
    let bin = cfg.checkpoint_stem().with_extension("bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes[10] ^= 1;
    std::fs::write(&bin, bytes).unwrap();
    assert_eq!(code(&obda(&["eval", "--config", s(&p)])), 5);
}

#[test]
fn packet_from_another_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let a = experiment(&dir.path().join("a"), 8, 2);
    let mut b = experiment(&dir.path().join("b"), 8, 2);
    b.seed = 9;
    let (pa, pb) = (write_config(&dir.path().join("a"), &a), write_config(&dir.path().join("b"), &b));
    assert_eq!(code(&obda(&["train", "--config", s(&pa)])), 0);
    assert_eq!(code(&obda(&["train", "--config", s(&pb)])), 0);
    let scene = a.load_data().unwrap().test[0].clone();
    let (pre, post, packet) = (dir.path().join("pre.png"), dir.path().join("post.png"), dir.path().join("t.olp"));
    scene.pre.save_png(&pre).unwrap();
    scene.post.save_png(&post).unwrap();
    assert_eq!(code(&obda(&["encode-latent", "--config", s(&pa), "--pre", s(&pre), "--output", s(&packet)])), 0);
    let out = obda(&["detect", "--config", s(&pb), "--packet", s(&packet), "--post", s(&post), "--output", s(&dir.path().join("d.jsonl"))]);
    assert_eq!(code(&out), 5);
}

#[test]
fn detect_writes_product_and_padded_crops() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = experiment(dir.path(), 8, 2);
    // an untrained head still emits candidates at a tiny threshold
    cfg.eval.decode.conf_threshold = 1e-6;
    cfg.eval.decode.max_candidates = 5;
    let p = write_config(dir.path(), &cfg);
    assert_eq!(code(&obda(&["train", "--config", s(&p)])), 0);
    let scene = cfg.load_data().unwrap().test[0].clone();
    let (pre, post, packet) = (dir.path().join("pre.png"), dir.path().join("post.png"), dir.path().join("t.olp"));
    scene.pre.save_png(&pre).unwrap();
    scene.post.save_png(&post).unwrap();
    assert_eq!(code(&obda(&["encode-latent", "--config", s(&p), "--pre", s(&pre), "--output", s(&packet), "--tile-id", "tile_a"])), 0);
    let product = dir.path().join("out/d.jsonl");
    let crops = dir.path().join("crops");
    let out = obda(&["detect", "--config", s(&p), "--packet", s(&packet), "--post", s(&post), "--output", s(&product), "--crops", s(&crops)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<Value> = std::fs::read_to_string(&product).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!lines.is_empty());
    let hash = cfg.hash().unwrap().to_hex();
    let mut files: Vec<PathBuf> = std::fs::read_dir(&crops).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), lines.len());
    for (k, l) in lines.iter().enumerate() {
        assert_eq!(l["tile_id"], "tile_a");
        assert_eq!(l["config_hash"], hash.as_str());
        assert!(l["class"].is_string() && l["confidence"].as_f64().unwrap() > 0.0);
        let b: Vec<f64> = l["box"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let want_w = ((b[2] + 8.0).ceil().min(256.0) - (b[0] - 8.0).floor().max(0.0)) as usize;
        let want_h = ((b[3] + 8.0).ceil().min(256.0) - (b[1] - 8.0).floor().max(0.0)) as usize;
        let crop = Raster::load_png(&crops.join(format!("tile_a_{k:04}_{}.png", l["class"].as_str().unwrap()))).unwrap();
        assert_eq!((crop.width(), crop.height()), (want_w, want_h), "crop {k} for box {b:?}");
    }
}

#[test]
fn sweep_csv_has_the_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(dir.path(), 12, 2);
    let p = write_config(dir.path(), &cfg);
    assert_eq!(code(&obda(&["train", "--config", s(&p)])), 0);
    let stem = dir.path().join("sw");
    let out = obda(&["sweep-shift", "--config", s(&p), "--magnitudes", "0,8,24", "--output", s(&stem)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_path(stem.with_extension("csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["shift_magnitude", "direction", "map50", "loc_f1", "cls_acc"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    // four diagonal directions plus the mean, for each magnitude
    assert_eq!(rows.len(), 3 * 5);
    let mags: std::collections::BTreeSet<u32> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(mags.into_iter().collect::<Vec<_>>(), vec![0, 8, 24]);
    let json: Value = serde_json::from_slice(&std::fs::read(stem.with_extension("json")).unwrap()).unwrap();
    // the hash names the effective config, override included
    let mut effective = cfg.clone();
    effective.sweep.magnitudes = vec![0, 8, 24];
    assert_eq!(json["config_hash"], effective.hash().unwrap().to_hex().as_str());
}

#[test]
fn eval_report_and_budget_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(dir.path(), 8, 2);
    let p = write_config(dir.path(), &cfg);
    assert_eq!(code(&obda(&["train", "--config", s(&p)])), 0);
    let out = obda(&["eval", "--config", s(&p), "--split", "val"]);
    assert_eq!(code(&out), 0);
    let report: Value = serde_json::from_slice(&std::fs::read(cfg.output_dir.join("eval_report.json")).unwrap()).unwrap();
    assert!(report["map50"].is_number() && report["localization_f1"].is_number());
    assert_eq!(report["config_hash"], cfg.hash().unwrap().to_hex().as_str());

    // the experiment file doubles as a budget scenario source
    let b = obda(&["budget", "--config", s(&p), "--ratio", "64"]);
    assert_eq!(code(&b), 0);
    let v: Value = serde_json::from_slice(&b.stdout).unwrap();
    assert_eq!(v["latent_uplink_bytes"], 8_601_600);
    assert_eq!(v["tiles"], 150);
}

#[test]
fn gen_data_roundtrips_through_xbd_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(dir.path(), 6, 1);
    let p = write_config(dir.path(), &cfg);
    let data = dir.path().join("data");
    let out = obda(&["gen-data", "--config", s(&p), "--output", s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["scenes"], 6);

    let generated = cfg.load_data().unwrap();
    let mut all: Vec<_> = generated.train.iter().chain(&generated.val).chain(&generated.test).cloned().collect();
    all.sort_by(|a, b| a.id.cmp(&b.id));
    let mut ingested = ingest_xbd(&data.join("images"), &data.join("labels")).unwrap().pairs;
    ingested.sort_by(|a, b| a.id.cmp(&b.id));
    assert_eq!(ingested.len(), all.len());
    for (a, b) in all.iter().zip(&ingested) {
        assert_eq!(a.pre, b.pre);
        assert_eq!(a.post, b.post);
        assert_eq!(a.annotations.len(), b.annotations.len());
        for (x, y) in a.annotations.iter().zip(&b.annotations) {
            assert_eq!(x.damage_class, y.damage_class);
            for (u, v) in [(x.bbox.x_min, y.bbox.x_min), (x.bbox.y_min, y.bbox.y_min), (x.bbox.x_max, y.bbox.x_max), (x.bbox.y_max, y.bbox.y_max)] {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    // the manifest reproduces the same split
    let mut from_manifest = cfg.clone();
    from_manifest.data = DataSource::Manifest { path: data.join("manifest.json") };
    let m = from_manifest.load_data().unwrap();
    assert_eq!(m.split, generated.split);
    assert_eq!(m.test, generated.test);
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = experiment(&dir.path().join("a"), 8, 6);
    let b = experiment(&dir.path().join("b"), 8, 6);
    let (_, sa) = commands::run_train(&a, true).unwrap();
    let (_, sb) = commands::run_train(&b, true).unwrap();
    assert_eq!(sa.final_loss, sb.final_loss);
    let wa = std::fs::read(a.checkpoint_stem().with_extension("bin")).unwrap();
    let wb = std::fs::read(b.checkpoint_stem().with_extension("bin")).unwrap();
    assert_eq!(wa, wb);
    let c = experiment(&dir.path().join("c"), 8, 6).with_seed(Some(1));
    commands::run_train(&c, true).unwrap();
    assert_ne!(wa, std::fs::read(c.checkpoint_stem().with_extension("bin")).unwrap());
}

#[test]
fn smoke_training_reduces_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = experiment(dir.path(), 64, 2000);
    cfg.model = ModelConfig::toy(VariantConfig::siamese());
    cfg.train.warmup_steps = 100;
    cfg.data = DataSource::Synthetic { spec: SyntheticSceneSpec::default(), count: 64, first_seed: 0, fractions: [1.0, 0.0, 0.0], split_seed: 0 };
    cfg.eval.val_every = 0;
    let (_, summary) = commands::run_train(&cfg, true).unwrap();
    assert!(summary.final_loss < 0.25 * summary.initial_loss, "{} -> {}", summary.initial_loss, summary.final_loss);
}
