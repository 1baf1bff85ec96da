use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use obda::commands::{self, Split};
use obda::config::ExperimentConfig;
use obda::{exit_code, EXIT_INPUT};
use obda_core::budget::Decimal;
use obda_core::Result;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "obda", version, about = "Bi-temporal building damage assessment with ground-encoded latents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint + log into the output directory.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fixed-support misregistration sweep; writes JSON and CSV.
    SweepShift {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated magnitudes in pixels, replacing the config's.
        #[arg(long, value_delimiter = ',')]
        magnitudes: Option<Vec<u32>>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Output stem; `.json` and `.csv` are appended.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Uplink/downlink and timing budget for a mapping scenario.
    Budget {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        area_km2: Option<String>,
        #[arg(long)]
        gsd: Option<String>,
        #[arg(long)]
        ratio: Option<usize>,
        #[arg(long)]
        detections: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Ground side: pre-event image to a latent packet.
    EncodeLatent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Defaults to the pre image's file stem.
        #[arg(long)]
        tile_id: Option<String>,
        #[arg(long, default_value_t = 0)]
        geo_x: i32,
        #[arg(long, default_value_t = 0)]
        geo_y: i32,
    },
    /// On board: latent packet + post-event image to detection product.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        packet: PathBuf,
        #[arg(long)]
        post: PathBuf,
        /// JSON-lines detection product.
        #[arg(long)]
        output: PathBuf,
        /// Directory for padded PNG crops of each detection.
        #[arg(long)]
        crops: Option<PathBuf>,
    },
    /// Write a synthetic dataset in the xBD layout plus its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<output_dir>/data`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train and evaluate architecture rows from one base config.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated row names; all rows when omitted.
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<String>>,
        /// Comma-separated seeds; the config seed when omitted.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Also run the shift sweep for every model.
        #[arg(long)]
        sweep: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(&common.config)?.with_seed(common.seed))
}

fn print<S: Serialize>(value: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parse_decimal(s: &Option<String>) -> Result<Option<Decimal>> {
    s.as_deref().map(str::parse).transpose()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let cfg = load(&common)?;
            let (_, summary) = commands::run_train(&cfg, false)?;
            print(&summary)
        }
        Command::Eval { common, checkpoint, split, output } => {
            let cfg = load(&common)?;
            let model = commands::load_model(&cfg, checkpoint.as_deref())?;
            let report = commands::run_eval(&cfg, &model, split)?;
            commands::write_json(&output.unwrap_or_else(|| cfg.output_dir.join("eval_report.json")), &report)?;
            print(&report)
        }
        Command::SweepShift { common, checkpoint, magnitudes, split, output } => {
            let mut cfg = load(&common)?;
            let model = commands::load_model(&cfg, checkpoint.as_deref())?;
            if let Some(m) = magnitudes {
                // the checkpoint hash was checked above; the sweep itself is
                // not part of what was trained
                cfg.sweep.magnitudes = m;
                cfg.sweep.validate()?;
            }
            let out = commands::run_sweep(&cfg, &model, split)?;
            let stem = output.unwrap_or_else(|| cfg.output_dir.join("sweep"));
            commands::write_json(&stem.with_extension("json"), &out)?;
            commands::write_sweep_csv(&stem.with_extension("csv"), &out.result.csv_rows())?;
            print(&out.result.mean_rows)
        }
        Command::Budget { common, area_km2, gsd, ratio, detections, output } => {
            let mut s = commands::load_budget_scenario(&common.config)?;
            if let Some(a) = parse_decimal(&area_km2)? {
                s.area_km2 = a;
            }
            if let Some(g) = parse_decimal(&gsd)? {
                s.gsd_m_per_px = g;
            }
            if ratio.is_some() {
                s.compression_ratio = ratio;
            }
            if detections.is_some() {
                s.detections = detections;
            }
            let report = commands::run_budget(&s)?;
            if let Some(p) = output {
                commands::write_json(&p, &report)?;
            }
            print(&report)
        }
        Command::EncodeLatent { common, checkpoint, pre, output, tile_id, geo_x, geo_y } => {
            let cfg = load(&common)?;
            let model = commands::load_model(&cfg, checkpoint.as_deref())?;
            let tile = tile_id.unwrap_or_else(|| stem_of(&pre));
            print(&commands::run_encode(&cfg, &model, &pre, &tile, (geo_x, geo_y), &output)?)
        }
        Command::Detect { common, checkpoint, packet, post, output, crops } => {
            let cfg = load(&common)?;
            let model = commands::load_model(&cfg, checkpoint.as_deref())?;
            let (tile, dets, image) = commands::run_detect(&cfg, &model, &packet, &post)?;
            commands::write_product(&output, &tile, cfg.hash()?, &dets)?;
            let crop_files = match crops {
                Some(dir) => commands::write_crops(&dir, &tile, &image, &dets)?.len(),
                None => 0,
            };
            print(&serde_json::json!({ "tile_id": tile, "detections": dets.len(), "crops": crop_files, "product": output }))
        }
        Command::GenData { common, output } => {
            let cfg = load(&common)?;
            let dir = output.unwrap_or_else(|| cfg.output_dir.join("data"));
            print(&commands::run_gen_data(&cfg, &dir)?)
        }
        Command::Ablate { common, rows, seeds, sweep, jobs } => {
            let cfg = load(&common)?;
            let rows = rows.unwrap_or_else(|| obda_core::fusion::VariantConfig::table_rows().iter().map(|(n, _)| n.to_string()).collect());
            let seeds = seeds.unwrap_or_else(|| vec![cfg.seed]);
            let out = commands::run_ablation(&cfg, &rows, &seeds, sweep, jobs)?;
            commands::write_json(&cfg.output_dir.join("ablation.json"), &out)?;
            commands::write_ablation_csv(&cfg.output_dir.join("ablation.csv"), &out)?;
            print(&out.rows)
        }
    }
}

fn stem_of(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("tile").to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
