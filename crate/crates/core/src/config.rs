//! TOML run configuration.
//!
//! ```toml
//! schema_version = 1
//! dataset = "mnist"
//! data_dir = "data/mnist"
//! problem = "D5-1^5A"
//! profile = "desk"
//! seeds = [0, 1, 2]
//!
//! [replay]
//! kind = "constant_time"
//!
//! [scholar]
//! k = 100
//! ```
//!
//! Every key is optional. The profile fills in the scholar settings and the
//! training-data fraction; explicit `[scholar]` keys override the profile.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{CilProblem, Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::scholar::{ReplayPlan, ReplayStrategy, ScholarConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small mixture, short budgets and a fifth of the training data.
    Desk,
    Full,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::InvalidConfig(format!(
                "unknown profile {other:?}; expected desk or full"
            ))),
        }
    }
}

impl Profile {
    pub fn scholar(self) -> ScholarConfig {
        match self {
            Profile::Full => ScholarConfig::default(),
            Profile::Desk => ScholarConfig {
                k: 100,
                initial_epochs: 32,
                replay_epochs: 64,
                // the radius must still reach its floor within 32 epochs
                initial_gamma: 0.88,
                ..ScholarConfig::default()
            },
        }
    }

    pub fn train_fraction(self) -> f64 {
        match self {
            Profile::Full => 1.0,
            Profile::Desk => 0.2,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: Option<u32>,
    dataset: Option<DatasetKind>,
    data_dir: Option<PathBuf>,
    problem: Option<String>,
    profile: Option<Profile>,
    seeds: Option<Vec<u64>>,
    out_dir: Option<PathBuf>,
    train_fraction: Option<f64>,
    replay: Option<ReplayStrategy>,
    scholar: Option<toml::Table>,
}

/// Fully resolved settings of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub problem: String,
    pub profile: Profile,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub train_fraction: f64,
    pub replay: ReplayStrategy,
    pub scholar: ScholarConfig,
}

impl RunConfig {
    /// Parses a config; relative paths are taken relative to `base_dir`.
    /// `profile` overrides the file's profile.
    pub fn from_toml_str(text: &str, base_dir: &Path, profile: Option<Profile>) -> Result<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        let version = raw.schema_version.unwrap_or(SCHEMA_VERSION);
        if version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "schema_version {version} is not supported (expected {SCHEMA_VERSION})"
            )));
        }
        let profile = profile.or(raw.profile).unwrap_or(Profile::Full);
        let mut scholar = toml::Table::try_from(profile.scholar())
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if let Some(overrides) = raw.scholar {
            scholar.extend(overrides);
        }
        let scholar: ScholarConfig = scholar.try_into().map_err(|e: toml::de::Error| {
            Error::InvalidConfig(format!("[scholar]: {}", e.message()))
        })?;
        let dataset = raw.dataset.unwrap_or(DatasetKind::Mnist);
        let data_dir = raw
            .data_dir
            .unwrap_or_else(|| PathBuf::from("data").join(dataset.to_string()));
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base_dir.join(p) };
        let cfg = Self {
            schema_version: version,
            dataset,
            data_dir: resolve(data_dir),
            problem: raw.problem.unwrap_or_else(|| "D5-1^5A".into()),
            profile,
            seeds: raw.seeds.unwrap_or_else(|| (0..10).collect()),
            out_dir: raw.out_dir.map(resolve),
            train_fraction: raw.train_fraction.unwrap_or(profile.train_fraction()),
            replay: raw.replay.unwrap_or(ReplayStrategy::ConstantTime),
            scholar,
        };
        cfg.check_values()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, profile: Option<Profile>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base, profile)
    }

    fn check_values(&self) -> Result<()> {
        self.scholar.validate()?;
        CilProblem::by_name(&self.problem)?;
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train_fraction {} must lie in (0, 1]",
                self.train_fraction
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Value checks plus existence of the dataset files.
    pub fn validate(&self) -> Result<()> {
        self.check_values()?;
        Dataset::locate(self.dataset, &self.data_dir)?;
        Ok(())
    }

    pub fn plan(&self) -> ReplayPlan {
        ReplayPlan {
            strategy: self.replay,
            batch: self.scholar.batch_size,
        }
    }
}
