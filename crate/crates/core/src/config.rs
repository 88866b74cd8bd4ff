//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::LatentConfig;
use crate::metrics::DbaConfig;
use crate::scene::{SceneConfig, POSITION, RADAR_CUBE, RF_POWER};
use crate::task::TaskConfig;
use crate::trainer::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Fractions of training episodes used for multimodal alignment.
    pub align_fractions: Vec<f64>,
    /// `(shared_dim, private_dim)` pairs for the latent-split sweep.
    pub ratio_sweep: Vec<[usize; 2]>,
    /// Modality sets masked at inference.
    pub drop_sets: Vec<Vec<String>>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Self {
            align_fractions: vec![0.05, 0.2, 1.0],
            ratio_sweep: vec![[8, 24], [24, 8]],
            drop_sets: vec![
                s(&[RF_POWER]),
                s(&[POSITION]),
                s(&[RADAR_CUBE]),
                s(&[POSITION, RADAR_CUBE]),
                s(&[RF_POWER, POSITION, RADAR_CUBE]),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub latent: LatentConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub metrics: DbaConfig,
    #[serde(default)]
    pub ablations: AblationConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            output: default_output(),
            scene: SceneConfig::default(),
            latent: LatentConfig::default(),
            train: TrainConfig::default(),
            task: TaskConfig::default(),
            metrics: DbaConfig::default(),
            ablations: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.scene.validate()?;
        self.latent.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        self.metrics.validate()?;
        if self
            .ablations
            .align_fractions
            .iter()
            .any(|&f| !(f > 0.0 && f <= 1.0))
        {
            return Err(Error::Config("ablations: align fractions must lie in (0, 1]".into()));
        }
        if self.ablations.ratio_sweep.iter().any(|r| r[0] == 0) {
            return Err(Error::Config("ablations: shared dimension must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
