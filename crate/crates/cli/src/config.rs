//! Optional TOML config file and flag resolution (flag > file > default).

use std::path::Path;

use anyhow::Context;
use avasd::dsp::MfccConfig;
use avasd::io::synth::SynthConfig;
use avasd::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Every table is optional; missing keys keep their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub synth: SynthConfig,
    pub mfcc: MfccConfig,
    pub train: TrainConfig,
    pub model: ModelChoice,
    pub bench: BenchConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelChoice {
    pub variant: avasd::model::Variant,
    pub bigru_layers: usize,
    /// `desk` (narrow, trainable on one core) or `paper` (full width).
    pub preset: Preset,
}

impl Default for ModelChoice {
    fn default() -> Self {
        ModelChoice {
            variant: avasd::model::Variant::M1,
            bigru_layers: 2,
            preset: Preset::Desk,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl ModelChoice {
    pub fn config(&self) -> avasd::model::ModelConfig {
        let mut c = match self.preset {
            Preset::Desk => avasd::model::ModelConfig::desk(self.variant),
            Preset::Paper => avasd::model::ModelConfig::paper(self.variant),
        };
        c.stream_bigru_layers = self.bigru_layers;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub reps: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { reps: 100, warmup: 10 }
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| crate::UsageError(format!("config {}: {e}", path.display())).into())
    }
}

/// Overwrites `slot` when the flag was given.
pub fn apply<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}
