use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use folio_core::environment::{CostModel, EnvConfig, RewardForm};
use folio_core::es::EsConfig;
use folio_core::market_data::{
    build_feature_cube, generate_synthetic, load_ohlcv, AssetProcess, FeatureCube, FeatureKind, PriceSeries,
    SyntheticSpec,
};
use folio_core::pgac::{DayRange, PgacConfig};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Everything a run needs. Written back out with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed; overrides the per-agent seeds.
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub train_days: usize,
    pub test_days: usize,
    pub features: Vec<FeatureKind>,
    pub data: DataSource,
    pub env: EnvSection,
    pub pgac: PgacSection,
    pub es: EsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: None,
            train_days: 500,
            test_days: 10,
            features: FeatureKind::default_set(),
            data: DataSource::default(),
            env: EnvSection::default(),
            pgac: PgacSection::default(),
            es: EsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv {
        path: PathBuf,
    },
    Synthetic {
        seed: u64,
        days: usize,
        start_date: NaiveDate,
        assets: Vec<AssetProcess>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        let asset = |name: &str, drift: f64, volatility: f64| AssetProcess {
            name: name.into(),
            drift,
            volatility,
            initial_price: 1.0,
        };
        DataSource::Synthetic {
            seed: 0,
            days: 600,
            start_date: NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date"),
            assets: vec![
                asset("A1", 0.0003, 0.010),
                asset("A2", 0.0005, 0.015),
                asset("A3", -0.0001, 0.020),
            ],
        }
    }
}

impl DataSource {
    pub fn load(&self) -> Result<PriceSeries> {
        match self {
            DataSource::Csv { path } => load_ohlcv(path).with_context(|| format!("loading {}", path.display())),
            DataSource::Synthetic {
                seed,
                days,
                start_date,
                assets,
            } => {
                let spec = SyntheticSpec {
                    assets: assets.clone(),
                    days: *days,
                    start_date: *start_date,
                };
                Ok(generate_synthetic(&spec, *seed)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub amplification: f64,
    pub reward_form: RewardForm,
    pub reward_floor: f64,
    pub costs: CostModel,
}

impl Default for EnvSection {
    fn default() -> Self {
        let env = EnvConfig::default();
        Self {
            amplification: env.amplification,
            reward_form: env.reward_form,
            reward_floor: env.reward_floor,
            costs: env.costs,
        }
    }
}

impl EnvSection {
    pub fn with_horizon(&self, horizon: usize) -> EnvConfig {
        EnvConfig {
            horizon,
            amplification: self.amplification,
            costs: self.costs,
            reward_form: self.reward_form,
            episode_cap: None,
            reward_floor: self.reward_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgacSection {
    /// Days of history in each state.
    pub horizon: usize,
    #[serde(flatten)]
    pub train: PgacConfig,
}

impl Default for PgacSection {
    fn default() -> Self {
        Self {
            horizon: 50,
            train: PgacConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EsSection {
    pub horizon: usize,
    #[serde(flatten)]
    pub train: EsConfig,
}

impl Default for EsSection {
    fn default() -> Self {
        Self {
            horizon: 3,
            train: EsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file. Relative CSV paths are taken relative to the
    /// file's directory and stored absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if config.schema_version != SCHEMA_VERSION {
            bail!(
                "config schema version {} is not supported (expected {SCHEMA_VERSION})",
                config.schema_version
            );
        }
        if let DataSource::Csv { path: csv } = &mut config.data {
            if csv.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                *csv = base.join(&*csv);
            }
        }
        config.sync_seeds();
        Ok(config)
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let mut config: RunConfig = serde_json::from_value(value.clone()).context("reading embedded run config")?;
        config.sync_seeds();
        Ok(config)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sync_seeds();
        self
    }

    fn sync_seeds(&mut self) {
        self.pgac.train.seed = self.seed;
        self.es.train.seed = self.seed;
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// The config as stored inside checkpoints. The output directory is
    /// left out so the same run written to two places gives the same bytes.
    pub fn provenance(&self) -> Result<serde_json::Value> {
        let mut value = serde_json::to_value(self)?;
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        Ok(value)
    }

    pub fn train_range(&self) -> DayRange {
        DayRange {
            first: 0,
            last: self.train_days.saturating_sub(1),
        }
    }

    pub fn build_cube(&self, series: &PriceSeries) -> Result<FeatureCube> {
        Ok(build_feature_cube(series, &self.features)?)
    }

    /// Checks that the training and default test windows fit `n_days`.
    pub fn check_windows(&self, n_days: usize, horizon: usize) -> Result<()> {
        if self.train_days < horizon + 2 {
            bail!(
                "train_days = {} is too short for a horizon of {horizon} days",
                self.train_days
            );
        }
        if self.test_days == 0 {
            bail!("test_days must be positive");
        }
        if self.train_days + self.test_days > n_days {
            bail!(
                "train_days + test_days = {} exceeds the {n_days} days of data",
                self.train_days + self.test_days
            );
        }
        Ok(())
    }
}
