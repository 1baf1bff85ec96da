use std::fs;
use std::path::{Path, PathBuf};

use obda_core::budget::BudgetScenario;
use obda_core::datasets::{generate_scene, ingest_xbd, make_split, DatasetSplit, SyntheticManifest, SyntheticSceneSpec, DEFAULT_FRACTIONS};
use obda_core::detector::DecodeConfig;
use obda_core::evaluation::DEFAULT_OPERATING_THRESHOLD;
use obda_core::fusion::VariantConfig;
use obda_core::geoproto::{ScenePair, SweepSpec};
use obda_core::hashing::ConfigHash;
use obda_core::model::ModelConfig;
use obda_core::train::TrainConfig;
use obda_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Where scenes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Generated on the fly; nothing touches the disk.
    Synthetic {
        #[serde(default)]
        spec: SyntheticSceneSpec,
        count: usize,
        #[serde(default)]
        first_seed: u64,
        #[serde(default = "default_fractions")]
        fractions: [f64; 3],
        #[serde(default)]
        split_seed: u64,
    },
    /// A manifest written by `gen-data`.
    Manifest { path: PathBuf },
    /// xBD-style directories.
    Xbd {
        image_dir: PathBuf,
        label_dir: PathBuf,
        #[serde(default = "default_fractions")]
        fractions: [f64; 3],
        #[serde(default)]
        split_seed: u64,
    },
}

fn default_fractions() -> [f64; 3] {
    DEFAULT_FRACTIONS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub decode: DecodeConfig,
    pub operating_threshold: f64,
    /// Validation mAP is logged every this many training steps (0 disables).
    pub val_every: usize,
    /// Cap on validation scenes used during training.
    pub val_limit: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { decode: DecodeConfig::default(), operating_threshold: DEFAULT_OPERATING_THRESHOLD, val_every: 500, val_limit: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSource,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default = "default_sweep")]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub budget: BudgetScenario,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/experiment")
}

fn default_sweep() -> SweepSpec {
    SweepSpec::new(vec![0, 16, 32, 48, 64])
}

pub struct LoadedData {
    pub train: Vec<ScenePair>,
    pub val: Vec<ScenePair>,
    pub test: Vec<ScenePair>,
    pub split: DatasetSplit,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sweep.validate()?;
        if let DataSource::Synthetic { spec, count, .. } = &self.data {
            spec.validate()?;
            if *count == 0 {
                return Err(Error::Config("synthetic data source needs a positive count".into()));
            }
        }
        Ok(())
    }

    /// Hash of everything that determines the run's results; the output
    /// directory is excluded so a run can be moved.
    pub fn hash(&self) -> Result<ConfigHash> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        ConfigHash::of(&c)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    /// The same experiment with a different architecture row, as used by the
    /// ablation runner: only variant fields change.
    pub fn with_variant(&self, variant: VariantConfig) -> Self {
        let mut c = self.clone();
        c.model.variant = variant;
        c
    }

    pub fn checkpoint_stem(&self) -> PathBuf {
        self.output_dir.join("checkpoint")
    }

    pub fn load_data(&self) -> Result<LoadedData> {
        match &self.data {
            DataSource::Synthetic { spec, count, first_seed, fractions, split_seed } => {
                let manifest = SyntheticManifest::new(spec.clone(), *count, *first_seed, *fractions, *split_seed)?;
                from_manifest(&manifest)
            }
            DataSource::Manifest { path } => {
                let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read manifest {}: {e}", path.display())))?;
                let manifest: SyntheticManifest = serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
                from_manifest(&manifest)
            }
            DataSource::Xbd { image_dir, label_dir, fractions, split_seed } => {
                let ingested = ingest_xbd(image_dir, label_dir)?;
                if ingested.pairs.is_empty() {
                    return Err(Error::Input(format!("no image pairs found under {}", image_dir.display())));
                }
                let ids: Vec<String> = ingested.pairs.iter().map(|p| p.id.clone()).collect();
                let split = make_split(&ids, *fractions, *split_seed)?;
                let pick = |names: &[String]| -> Vec<ScenePair> {
                    names.iter().filter_map(|n| ingested.pairs.iter().find(|p| &p.id == n).cloned()).collect()
                };
                Ok(LoadedData { train: pick(&split.train), val: pick(&split.val), test: pick(&split.test), split })
            }
        }
    }
}

fn from_manifest(m: &SyntheticManifest) -> Result<LoadedData> {
    let load = |ids: &[String]| -> Result<Vec<ScenePair>> { ids.iter().map(|id| generate_scene(&m.spec, m.seed_of(id)?)).collect() };
    Ok(LoadedData { train: load(&m.split.train)?, val: load(&m.split.val)?, test: load(&m.split.test)?, split: m.split.clone() })
}
