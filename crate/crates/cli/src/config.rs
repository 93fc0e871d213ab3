//! Run configuration: one JSON document covering every subcommand.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use faultline::attribution::AttributionConfig;
use faultline::campaign::{default_thresholds, CampaignConfig, DEFAULT_BUDGET, DEFAULT_SEEDS};
use faultline::data::{synth_blobs, Dataset, Manifest};
use faultline::fat::FatConfig;
use faultline::fault_model::ExperimentCode;
use faultline::model::Model;
use faultline::train::TrainConfig;
use faultline::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attribution: AttributionConfig,
    pub campaign: CampaignSection,
    pub fat: FatConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            attribution: AttributionConfig::default(),
            campaign: CampaignSection::default(),
            fat: FatConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Seeded Gaussian blobs, split 90/10 by index.
    Synth {
        classes: usize,
        samples_per_class: usize,
        shape: Vec<usize>,
        spread: f32,
        seed: u64,
    },
    /// IDX train/test pair described by a manifest file.
    Manifest { path: PathBuf },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synth {
            classes: 4,
            samples_per_class: 100,
            shape: vec![1, 8, 8],
            spread: 0.2,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    /// `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::Synth {
                classes,
                samples_per_class,
                shape,
                spread,
                seed,
            } => {
                Ok(synth_blobs(*classes, *samples_per_class, shape, *spread, *seed)?.split_90_10())
            }
            DatasetConfig::Manifest { path } => Manifest::load(path)?.load_datasets(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    SmallCnn { channels: [usize; 2], hidden: usize },
    Mlp { hidden: Vec<usize> },
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::SmallCnn {
            channels: [4, 8],
            hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn build(&self, data: &Dataset, seed: u64) -> Result<Model> {
        let shape = data.sample_shape();
        match self {
            ModelConfig::SmallCnn { channels, hidden } => {
                let [c, h, w] = shape else {
                    return Err(Error::Config(format!(
                        "small_cnn needs [c, h, w] samples, got {shape:?}"
                    )));
                };
                Model::small_cnn([*c, *h, *w], *channels, *hidden, data.classes, seed)
            }
            ModelConfig::Mlp { hidden } => {
                Model::mlp(shape.iter().product(), hidden, data.classes, seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignSection {
    pub code: Option<ExperimentCode>,
    pub thresholds: Vec<f64>,
    pub budget: usize,
    pub seeds: Vec<u64>,
    pub mix: f64,
    pub workers: usize,
    pub record_timing: bool,
}

impl Default for CampaignSection {
    fn default() -> Self {
        CampaignSection {
            code: None,
            thresholds: default_thresholds(),
            budget: DEFAULT_BUDGET,
            seeds: DEFAULT_SEEDS.to_vec(),
            mix: 0.0,
            workers: 1,
            record_timing: true,
        }
    }
}

impl CampaignSection {
    pub fn to_config(&self) -> Result<CampaignConfig> {
        let code = self.code.ok_or_else(|| {
            Error::Config("no experiment code; pass --code or set campaign.code".into())
        })?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(CampaignConfig {
            code,
            thresholds: self.thresholds.clone(),
            budget: self.budget,
            seeds: self.seeds.clone(),
            mix: self.mix,
            workers: self.workers,
            record_timing: self.record_timing,
            resume_from: 0,
        })
    }
}

impl RunConfig {
    /// Reads a config file. Malformed or unknown keys are configuration errors.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let cfg: RunConfig = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }
}

/// Parses `0,0.05,0.1` style lists.
pub fn parse_thresholds(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad threshold {t:?} in --thresholds")))
        })
        .collect()
}
