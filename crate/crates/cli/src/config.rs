//! Run configuration: a JSON file whose fields all have defaults, overlaid by
//! command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use vessel_synth::model::ArchitectureConfig;
use vessel_synth::phantom::PhantomConfig;
use vessel_synth::training::TrainingConfig;

/// Settings that differ between the two training phases when both run in one
/// command. Unset fields fall back to `training`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase2Overrides {
    pub learning_rate: Option<f64>,
    pub max_epochs: Option<usize>,
    pub momentum: Option<f64>,
    pub batch_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub architecture: ArchitectureConfig,
    pub training: TrainingConfig,
    pub phase2: Phase2Overrides,
    pub phantom: PhantomConfig,
    /// Dataset manifest (`manifest.json`).
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            architecture: ArchitectureConfig::desk_scale(),
            training: TrainingConfig::default(),
            phase2: Phase2Overrides::default(),
            phantom: PhantomConfig::default(),
            manifest: None,
            out_dir: None,
            checkpoint: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    /// Writes the resolved configuration as `<dir>/<name>`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(name);
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Training settings for `phase`, with phase-2 overrides applied.
    pub fn training_for(&self, phase: u8) -> TrainingConfig {
        let mut t = self.training.clone();
        t.phase = phase;
        if phase == 2 {
            let o = &self.phase2;
            t.learning_rate = o.learning_rate.unwrap_or(t.learning_rate);
            t.max_epochs = o.max_epochs.unwrap_or(t.max_epochs);
            t.momentum = o.momentum.unwrap_or(t.momentum);
            t.batch_size = o.batch_size.unwrap_or(t.batch_size);
        }
        t
    }
}
