//! One JSON file holding every tunable of a desk-scale experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::HeuristicConfig;
use crate::dataset::Workspace;
use crate::encoder::EncoderConfig;
use crate::error::{invalid, Error, Result};
use crate::pointcloud::StageFrame;
use crate::policy::{PolicyConfig, RolloutConfig};
use crate::sim::{ClayConfig, DemoSettings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Root of generated and augmented trajectories.
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Where the service writes recorded demonstrations.
    pub demos_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data_dir: "data".into(), checkpoint_dir: "checkpoints".into(), demos_dir: "demos".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutSettings {
    pub max_grasps: usize,
    pub stop_threshold: f64,
    /// Neighbors averaged by the nearest-neighbor policy.
    pub nn_k: usize,
}

impl Default for RolloutSettings {
    fn default() -> Self {
        Self { max_grasps: 10, stop_threshold: 0.0, nn_k: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub frame: StageFrame,
    pub clay: ClayConfig,
    pub demos: DemoSettings,
    pub workspace: Workspace,
    pub encoder: EncoderConfig,
    pub policy: PolicyConfig,
    pub heuristic: HeuristicConfig,
    pub rollout: RolloutSettings,
    pub paths: Paths,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for Config {
    /// Desk-scale defaults: the lite encoder and a small U-Net that trains
    /// in minutes on one CPU core.
    fn default() -> Self {
        Self {
            frame: StageFrame::default(),
            clay: ClayConfig::default(),
            demos: DemoSettings::default(),
            workspace: Workspace::default(),
            encoder: EncoderConfig::lite(),
            policy: PolicyConfig::lite(),
            heuristic: HeuristicConfig::default(),
            rollout: RolloutSettings::default(),
            paths: Paths::default(),
            train_fraction: 0.8,
            split_seed: 0,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let cfg: Self = serde_json::from_slice(&raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.frame.validate()?;
        self.clay.validate()?;
        self.workspace.validate()?;
        self.encoder.validate()?;
        self.policy.validate()?;
        self.heuristic.validate()?;
        if self.demos.cloud_size != self.encoder.cloud_size {
            return invalid(format!(
                "demos.cloud_size ({}) must equal encoder.cloud_size ({})",
                self.demos.cloud_size, self.encoder.cloud_size
            ));
        }
        if self.rollout.max_grasps == 0 {
            return invalid("rollout.max_grasps must be > 0");
        }
        if self.rollout.nn_k == 0 {
            return invalid("rollout.nn_k must be > 0");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return invalid("train_fraction must be in (0, 1)");
        }
        Ok(())
    }

    pub fn rollout_config(&self, seed: u64) -> RolloutConfig {
        RolloutConfig {
            max_grasps: self.rollout.max_grasps,
            stop_threshold: self.rollout.stop_threshold,
            execute_steps: self.policy.execute_steps,
            cloud_size: self.encoder.cloud_size,
            seed,
            workspace: self.workspace,
        }
    }
}
