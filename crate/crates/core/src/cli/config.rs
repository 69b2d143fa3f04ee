use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{ObsLayout, PolicyConfig, SftConfig};
use crate::envsynth::SynthSpec;
use crate::marl::{AblationFlags, PipelineConfig, TrainConfig};

use super::{CliError, Result};

/// Everything a run depends on. Missing keys in a config file take their
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub pipeline: PipelineConfig,
    pub policy: PolicyConfig,
    pub sft: SftConfig,
    pub train: TrainConfig,
    pub ablation: AblationFlags,
    /// Master seed for parameter init, warm start, rollouts and eval.
    pub seed: u64,
    /// Not part of the config hash: where a run writes has no bearing on
    /// what it computes.
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            pipeline: PipelineConfig::default(),
            policy: PolicyConfig::default(),
            sft: SftConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationFlags::default(),
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serialises");
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    /// Sets the master seed and the dataset seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn layout(&self) -> ObsLayout {
        ObsLayout {
            dim: self.synth.dim,
            num_labels: self.synth.num_labels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.pipeline.k_cog == 0 || self.pipeline.k_perc == 0 {
            return Err(CliError::Config("k_cog and k_perc must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding, output directory
    /// excluded.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out_dir");
        }
        // serde_json maps are ordered by key, so this encoding is canonical.
        let bytes = serde_json::to_vec(&v).expect("value serialises");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
