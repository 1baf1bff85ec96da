use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use obda_core::budget::{compute_budget, BudgetReport, BudgetScenario};
use obda_core::checkpoint;
use obda_core::codec::LatentPacket;
use obda_core::datasets::{write_xbd_pair, SyntheticManifest};
use obda_core::detector::Detection;
use obda_core::evaluation::{evaluate, sweep_shift, SweepResult, SweepRow};
use obda_core::fusion::VariantConfig;
use obda_core::geometry::{Raster, Rect};
use obda_core::geoproto::{DamageClass, ScenePair};
use obda_core::hashing::ConfigHash;
use obda_core::metrics::EvalReport;
use obda_core::model::{place_detections, prepare_input};
use obda_core::train::{train, StepRecord};
use obda_core::{Error, Model32, Result};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig};

/// Padding around exported detection crops.
pub const CROP_PADDING: usize = 8;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn json_line<S: Serialize>(out: &mut impl Write, path: &Path, value: &S) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: ConfigHash,
    pub steps: usize,
    pub initial_loss: f64,
    /// Mean over the last 5% of steps.
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub val_map50: Option<f64>,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Val { step: usize, map50: f64, loc_f1: f64, classification_accuracy: Option<f64> },
}

/// Trains, logs every step as JSON lines, saves the checkpoint.
pub fn run_train(cfg: &ExperimentConfig, quiet: bool) -> Result<(Model32, TrainSummary)> {
    let hash = cfg.hash()?;
    let data = cfg.load_data()?;
    if data.train.is_empty() {
        return Err(Error::Input("the training split is empty".into()));
    }
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("config.json"), cfg)?;
    let log_path = cfg.output_dir.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let val: Vec<ScenePair> = data.val.iter().take(cfg.eval.val_limit).cloned().collect();
    let mut val_map = None;
    let mut model = Model32::new(cfg.model.clone(), cfg.seed)?;
    let steps = cfg.train.steps;
    let records = train(&mut model, &data.train, &cfg.train, cfg.seed, |m, r| {
        json_line(&mut log, &log_path, &LogLine::Step(r))?;
        let last = r.step + 1 == steps;
        if !val.is_empty() && cfg.eval.val_every > 0 && ((r.step + 1) % cfg.eval.val_every == 0 || last) {
            let rep = evaluate(m, &val, &cfg.eval.decode, cfg.eval.operating_threshold)?;
            json_line(
                &mut log,
                &log_path,
                &LogLine::Val { step: r.step, map50: rep.map50, loc_f1: rep.localization_f1, classification_accuracy: rep.classification_accuracy },
            )?;
            if !quiet {
                log::info!("{}: step {} loss {:.4} val mAP@0.5 {:.3}", cfg.name, r.step, r.loss, rep.map50);
            }
            val_map = Some(rep.map50);
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let tail = (records.len() / 20).max(1);
    let final_loss = records[records.len() - tail..].iter().map(|r| r.loss).sum::<f64>() / tail as f64;
    let stem = cfg.checkpoint_stem();
    checkpoint::save(&model, &stem, hash, serde_json::json!({ "experiment": cfg, "steps": steps, "final_loss": final_loss }))?;
    let summary = TrainSummary { config_hash: hash, steps, initial_loss: records[0].loss, final_loss, checkpoint: stem, val_map50: val_map };
    Ok((model, summary))
}

/// Loads a checkpoint and rejects it unless it was trained under `cfg`.
pub fn load_model(cfg: &ExperimentConfig, stem: Option<&Path>) -> Result<Model32> {
    let stem = stem.map(Path::to_path_buf).unwrap_or_else(|| cfg.checkpoint_stem());
    let (model, _) = checkpoint::load::<f32>(&stem, Some(cfg.hash()?))?;
    if model.config != cfg.model {
        return Err(Error::Integrity(format!("{}: model config differs from the experiment config", stem.display())));
    }
    Ok(model)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

fn split_scenes(cfg: &ExperimentConfig, split: Split) -> Result<Vec<ScenePair>> {
    let d = cfg.load_data()?;
    let scenes = match split {
        Split::Train => d.train,
        Split::Val => d.val,
        Split::Test => d.test,
    };
    if scenes.is_empty() {
        return Err(Error::Input(format!("the {split:?} split is empty")));
    }
    Ok(scenes)
}

pub fn run_eval(cfg: &ExperimentConfig, model: &Model32, split: Split) -> Result<EvalReport> {
    let scenes = split_scenes(cfg, split)?;
    let mut report = evaluate(model, &scenes, &cfg.eval.decode, cfg.eval.operating_threshold)?;
    report.config_hash = Some(cfg.hash()?);
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepOutput {
    pub config_hash: ConfigHash,
    #[serde(flatten)]
    pub result: SweepResult,
}

pub fn run_sweep(cfg: &ExperimentConfig, model: &Model32, split: Split) -> Result<SweepOutput> {
    let scenes = split_scenes(cfg, split)?;
    let hash = cfg.hash()?;
    let mut result = sweep_shift(model, &scenes, &cfg.sweep, &cfg.eval.decode, cfg.eval.operating_threshold)?;
    result.reports.iter_mut().for_each(|r| r.config_hash = Some(hash));
    Ok(SweepOutput { config_hash: hash, result })
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let csv_err = |e: csv::Error| Error::Input(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the budget scenario from either a bare scenario document or the
/// `budget` field of an experiment config.
pub fn load_budget_scenario(path: &Path) -> Result<BudgetScenario> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let Some(b) = value.get_mut("budget") {
        value = b.take();
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn run_budget(scenario: &BudgetScenario) -> Result<BudgetReport> {
    compute_budget(scenario)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncodeSummary {
    pub tile_id: String,
    pub config_hash: ConfigHash,
    pub quantized: bool,
    pub packet_bytes: usize,
    pub payload_bytes: usize,
}

/// Ground side: pre image to packet file.
pub fn run_encode(cfg: &ExperimentConfig, model: &Model32, pre: &Path, tile_id: &str, geo_tag: (i32, i32), out: &Path) -> Result<EncodeSummary> {
    let raster = Raster::load_png(pre)?;
    let latent = model.encode_latent(&prepare_input(&raster)?)?;
    let hash = cfg.hash()?;
    let packet = LatentPacket::seal(tile_id, geo_tag, hash, &latent, model.config.quantizes())?;
    let bytes = packet.to_bytes()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(out, &bytes).map_err(|e| Error::io(out, e))?;
    Ok(EncodeSummary { tile_id: tile_id.into(), config_hash: hash, quantized: packet.is_quantized(), packet_bytes: bytes.len(), payload_bytes: packet.payload_bytes() })
}

/// One line of the downlinked detection product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductRecord {
    pub tile_id: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(rename = "class")]
    pub damage_class: DamageClass,
    pub confidence: f64,
    pub config_hash: ConfigHash,
}

/// On board: packet plus post image to detections in tile pixels.
pub fn run_detect(cfg: &ExperimentConfig, model: &Model32, packet_path: &Path, post: &Path) -> Result<(String, Vec<Detection>, Raster)> {
    let bytes = fs::read(packet_path).map_err(|e| Error::io(packet_path, e))?;
    let packet = LatentPacket::from_bytes(&bytes)?;
    packet.check_compatible(cfg.hash()?)?;
    let raster = Raster::load_png(post)?;
    let head = model.detect_from_latent(&packet.to_pyramid()?, &prepare_input(&raster)?)?;
    let dets = place_detections(&head, &cfg.eval.decode, (raster.width(), raster.height()), (0.0, 0.0))?;
    Ok((packet.tile_id, dets, raster))
}

pub fn write_product(path: &Path, tile_id: &str, hash: ConfigHash, dets: &[Detection]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for d in dets {
        let b = d.bbox;
        let rec = ProductRecord {
            tile_id: tile_id.into(),
            bbox: [b.x_min, b.y_min, b.x_max, b.y_max],
            damage_class: d.damage_class,
            confidence: d.confidence,
            config_hash: hash,
        };
        json_line(&mut out, path, &rec)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Crop of `image` around `det`, grown by [`CROP_PADDING`] on every side and
/// clipped to the image.
pub fn padded_crop(image: &Raster, det: &Detection) -> Result<Raster> {
    let b = det.bbox;
    let pad = CROP_PADDING as f64;
    let x0 = (b.x_min.floor() - pad).max(0.0) as usize;
    let y0 = (b.y_min.floor() - pad).max(0.0) as usize;
    let x1 = ((b.x_max.ceil() + pad) as usize).min(image.width());
    let y1 = ((b.y_max.ceil() + pad) as usize).min(image.height());
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::Input(format!("detection {b:?} lies outside the image")));
    }
    image.crop_in_frame(Rect::new(x0 as i64, y0 as i64, x1 - x0, y1 - y0), 0, 0)
}

pub fn write_crops(dir: &Path, tile_id: &str, image: &Raster, dets: &[Detection]) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    dets.iter()
        .enumerate()
        .map(|(k, d)| {
            let path = dir.join(format!("{tile_id}_{k:04}_{}.png", d.damage_class.as_str()));
            padded_crop(image, d)?.save_png(&path)?;
            Ok(path)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenDataSummary {
    pub manifest: PathBuf,
    pub image_dir: PathBuf,
    pub label_dir: PathBuf,
    pub scenes: usize,
}

/// Writes a synthetic source to disk in the xBD layout plus its manifest.
pub fn run_gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<GenDataSummary> {
    let DataSource::Synthetic { spec, count, first_seed, fractions, split_seed } = &cfg.data else {
        return Err(Error::Config("gen-data needs a synthetic data source".into()));
    };
    let manifest = SyntheticManifest::new(spec.clone(), *count, *first_seed, *fractions, *split_seed)?;
    let (image_dir, label_dir) = (out_dir.join("images"), out_dir.join("labels"));
    for &seed in &manifest.seeds {
        write_xbd_pair(&obda_core::datasets::generate_scene(spec, seed)?, &image_dir, &label_dir)?;
    }
    let path = out_dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(GenDataSummary { manifest: path, image_dir, label_dir, scenes: manifest.seeds.len() })
}

/// A named architecture row of the ablation table.
pub fn table_row(name: &str) -> Result<VariantConfig> {
    VariantConfig::table_rows()
        .into_iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, v)| v)
        .ok_or_else(|| Error::Config(format!("unknown ablation row {name:?}")))
}

fn slug(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRun {
    pub row: String,
    pub seed: u64,
    pub config_hash: ConfigHash,
    pub train: TrainSummary,
    pub report: EvalReport,
    pub sweep: Option<SweepOutput>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: String,
    pub seeds: Vec<u64>,
    pub map50: f64,
    pub loc_f1: f64,
    pub cls_acc: Option<f64>,
    /// Seed-averaged, direction-averaged sweep rows.
    pub sweep: Vec<SweepRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationOutput {
    pub base_config_hash: ConfigHash,
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = v.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn ablation_run(base: &ExperimentConfig, row: &str, variant: &VariantConfig, seed: u64, with_sweep: bool) -> Result<AblationRun> {
    let mut cfg = base.with_variant(variant.clone()).with_seed(Some(seed));
    cfg.name = format!("{row}/seed{seed}");
    cfg.output_dir = base.output_dir.join("ablation").join(slug(row)).join(format!("seed{seed}"));
    let (model, train) = run_train(&cfg, true)?;
    let report = run_eval(&cfg, &model, Split::Test)?;
    let sweep = if with_sweep { Some(run_sweep(&cfg, &model, Split::Test)?) } else { None };
    log::info!("{row} seed {seed}: test mAP@0.5 {:.3}", report.map50);
    Ok(AblationRun { row: row.into(), seed, config_hash: cfg.hash()?, train, report, sweep })
}

/// Trains and evaluates every (row, seed) from one base config. Runs are
/// spread over `workers` threads; results do not depend on the count.
pub fn run_ablation(base: &ExperimentConfig, rows: &[String], seeds: &[u64], with_sweep: bool, workers: usize) -> Result<AblationOutput> {
    let variants: Vec<(String, VariantConfig)> = rows.iter().map(|r| Ok((r.clone(), table_row(r)?))).collect::<Result<_>>()?;
    let jobs: Vec<(usize, u64)> = (0..variants.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<AblationRun>>> = (0..jobs.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(&(v, seed)) = jobs.get(k) else { break };
                let (name, variant) = &variants[v];
                let r = ablation_run(base, name, variant, seed, with_sweep);
                results.lock().expect("no worker panics while holding the lock")[k] = Some(r);
            });
        }
    });
    let runs: Vec<AblationRun> = slots.into_iter().map(|r| r.expect("every job ran")).collect::<Result<_>>()?;

    let mut table = Vec::new();
    for (name, _) in &variants {
        let mine: Vec<&AblationRun> = runs.iter().filter(|r| &r.row == name).collect();
        let mut sweep = Vec::new();
        for &m in &base.sweep.magnitudes {
            let rows: Vec<&SweepRow> = mine.iter().filter_map(|r| r.sweep.as_ref()?.result.row(m)).collect();
            if rows.is_empty() {
                continue;
            }
            sweep.push(SweepRow {
                shift_magnitude: m,
                direction: "mean".into(),
                map50: mean(rows.iter().map(|r| r.map50)).unwrap_or(0.0),
                loc_f1: mean(rows.iter().map(|r| r.loc_f1)).unwrap_or(0.0),
                cls_acc: mean(rows.iter().filter_map(|r| r.cls_acc)),
            });
        }
        table.push(AblationRow {
            row: name.clone(),
            seeds: seeds.to_vec(),
            map50: mean(mine.iter().map(|r| r.report.map50)).unwrap_or(0.0),
            loc_f1: mean(mine.iter().map(|r| r.report.localization_f1)).unwrap_or(0.0),
            cls_acc: mean(mine.iter().filter_map(|r| r.report.classification_accuracy)),
            sweep,
        });
    }
    Ok(AblationOutput { base_config_hash: base.hash()?, runs, rows: table })
}

#[derive(Serialize)]
struct TableLine<'a> {
    row: &'a str,
    map50: f64,
    loc_f1: f64,
    cls_acc: Option<f64>,
}

pub fn write_ablation_csv(path: &Path, out: &AblationOutput) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Input(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in &out.rows {
        w.serialize(TableLine { row: &r.row, map50: r.map50, loc_f1: r.loc_f1, cls_acc: r.cls_acc }).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
