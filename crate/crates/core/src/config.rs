//! Run configuration: profile defaults with a TOML file merged on top.
//!
//! ```toml
//! profile = "desk"
//! seed = 7
//!
//! [mining]
//! top_n = 20
//!
//! [segmentation]
//! k = 150.0
//!
//! [train]
//! batch_size = 16
//! ```
//!
//! Every key is optional; unknown keys are rejected by name.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::miner::MiningConfig;
use crate::model::Profile;
use crate::proposals::SegmentationParams;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub mining: MiningConfig,
    pub segmentation: SegmentationParams,
    pub train: TrainConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (mining, train) = match profile {
            Profile::Paper => (MiningConfig::paper(), TrainConfig::paper()),
            Profile::Desk => (MiningConfig::desk(), TrainConfig::desk()),
        };
        let mut cfg = RunConfig {
            profile,
            seed: 0,
            segmentation: mining.segmentation,
            mining,
            train,
            paths: PathsConfig::default(),
        };
        cfg.sync();
        cfg
    }

    /// Copies the shared fields (profile, seed, segmentation) into the
    /// per-module sections.
    fn sync(&mut self) {
        self.mining.segmentation = self.segmentation;
        self.mining.seed = self.seed;
        self.train.seed = self.seed;
        self.train.profile = self.profile;
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sync();
        self
    }

    /// Parses `text` over the defaults of its profile. `profile` overrides the
    /// file's own `profile` key.
    pub fn from_toml_str(text: &str, profile: Option<Profile>) -> Result<Self> {
        let file: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let profile = match (profile, file.get("profile")) {
            (Some(p), _) => p,
            (None, Some(v)) => Profile::deserialize(v.clone())
                .map_err(|e| Error::Config(format!("profile: {}", e.message())))?,
            (None, None) => Profile::default(),
        };
        let mut merged = toml::Table::try_from(Self::for_profile(profile))
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, file);
        merged.insert("profile".into(), toml::Value::try_from(profile).expect("profile serialises"));
        let mut cfg = RunConfig::deserialize(toml::Value::Table(merged))
            .map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, profile).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.mining.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
