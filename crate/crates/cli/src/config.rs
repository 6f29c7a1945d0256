//! Run configuration: a model preset with field overrides plus training
//! settings, read from JSON and then overridden by flags.

use std::path::Path;

use nadir::model::ModelConfig;
use nadir::training::TrainConfig;
use nadir::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const RUN_CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Tiny,
    #[default]
    Small,
    Base,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            "base" => Ok(Preset::Base),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected tiny, small or base)"))),
        }
    }
}

impl Preset {
    /// Vocabulary sizes are placeholders; training sets them from the data.
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::tiny(0, 0),
            Preset::Small => ModelConfig::small(0, 0),
            Preset::Base => ModelConfig::base(0, 0),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Fields replacing those of the preset's model configuration.
    pub model: Map<String, Value>,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = nadir::io::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The preset with overrides applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut base = serde_json::to_value(self.preset.model())?;
        let fields = base.as_object_mut().expect("model config serializes to an object");
        for (k, v) in &self.model {
            if !fields.contains_key(k) {
                return Err(Error::Config(format!("unknown model field {k:?}")));
            }
            fields.insert(k.clone(), v.clone());
        }
        serde_json::from_value(base).map_err(|e| Error::Config(format!("model config: {e}")))
    }
}

/// Fully resolved configuration echoed to the log and the output directory.
#[derive(Serialize)]
pub struct Resolved<'a> {
    pub schema_version: u32,
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
}
