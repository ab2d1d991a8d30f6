use std::path::{Path, PathBuf};

use aesm2::data::{load_csv, DatasetSchema, Splits, SyntheticSpec};
use aesm2::model::{ModelConfig, ModelKind};
use aesm2::train::TrainConfig;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

/// Paths of pre-split CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSource {
    pub train: PathBuf,
    pub val: Option<PathBuf>,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SyntheticSpec,
    /// When set, data is read from these files instead of generated.
    pub csv: Option<CsvSource>,
    /// Schema for CSV data; defaults to the synthetic spec's schema.
    pub schema: Option<DatasetSchema>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub model: Option<ModelKind>,
    pub no_aux: bool,
    pub no_noise: bool,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(kind) = overrides.model {
            cfg.model.kind = kind;
        }
        if overrides.no_aux {
            cfg.training.aux = false;
        }
        if overrides.no_noise {
            cfg.training.noise = false;
        }
        if let Some(out) = &overrides.out {
            cfg.out = out.clone();
        }
        cfg.training.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn schema(&self) -> DatasetSchema {
        self.data.schema.clone().unwrap_or_else(|| self.data.synthetic.schema())
    }

    /// Train/validation/test data, generated from the seed or read from CSV.
    pub fn load_data(&self) -> Result<Splits> {
        match &self.data.csv {
            Some(src) => {
                let schema = self.schema();
                let train = load_csv(&src.train, &schema)?;
                let val = match &src.val {
                    Some(p) => load_csv(p, &schema)?,
                    None => aesm2::data::Dataset::new(schema.clone(), Vec::new())?,
                };
                let test = load_csv(&src.test, &schema)?;
                Ok(Splits { train, val, test })
            }
            None => {
                if self.data.synthetic.samples.train == 0 {
                    bail!("synthetic spec requests zero training samples");
                }
                Ok(aesm2::data::generate_splits(&self.data.synthetic, self.seed)?)
            }
        }
    }
}
