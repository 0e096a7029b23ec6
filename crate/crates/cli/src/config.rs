use std::path::Path;

use serde::{Deserialize, Serialize};
use vwv::adapt::{AdaptConfig, Supervision};
use vwv::dataio::{write_json, DatasetConfig};
use vwv::dictionary::DictionaryConfig;
use vwv::metrics::EvalConfig;
use vwv::train::TrainConfig;

use crate::error::CliError;

pub const RESOLVED_CONFIG: &str = "resolved-config.json";

/// Every parameter a command can use. Missing keys take their defaults and
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: DatasetConfig,
    pub train: TrainConfig,
    /// Dictionary built from frame 0 at inference time.
    pub dictionary: DictionaryConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub infer: InferConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest split used for training; `null` uses every video.
    pub train_split: Option<String>,
    /// Manifest split used by infer, eval and ablate.
    pub eval_split: Option<String>,
    /// Progress goes to stderr once per this many episodes or frames.
    pub report_every: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_split: Some("train".into()),
            eval_split: Some("test".into()),
            report_every: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub supervision: Supervision,
    /// Also write `conf_%05d.pgm` maps.
    pub confidence_maps: bool,
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CliError::Missing(format!("config {}", path.display())))
        }
        Err(e) => return Err(CliError::Internal(format!("{}: {e}", path.display()))),
    };
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), parse)
    }

    /// Replaces the adaptation section with a standalone adaptation file.
    pub fn load_adapt(&mut self, path: &Path) -> Result<(), CliError> {
        self.adapt = parse(path)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let config = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.synth.video.validate().map_err(|e| config(&e))?;
        self.train.validate().map_err(|e| config(&e))?;
        self.adapt.validate().map_err(|e| config(&e))?;
        if self.dictionary.k_foreground == 0 || self.dictionary.background_multiplier == 0 {
            return Err(CliError::Config(
                "dictionary.k_foreground and dictionary.background_multiplier must be positive".into(),
            ));
        }
        if self.data.report_every == 0 {
            return Err(CliError::Config("data.report_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Writes the effective configuration next to a command's outputs.
    pub fn write_resolved(&self, out: &Path) -> Result<(), CliError> {
        write_json(&out.join(RESOLVED_CONFIG), self)?;
        Ok(())
    }
}
