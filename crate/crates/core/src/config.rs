//! Run configuration, read from TOML. Unknown keys are rejected everywhere.
//!
//! Defaults for training and sampling:
//!
//! | key | default |
//! |-----|---------|
//! | `train.l2_coeff` | 1.0 |
//! | `train.learning_rate` | 1e-4 |
//! | `train.beta1`, `train.beta2` | 0.0, 0.999 |
//! | `train.batch_size` | 128 |
//! | `train.clip_sigmas` | 3.0 |
//! | `train.buffer_size` | 10000 |
//! | `train.uniform_prob` | 0.05 |
//! | `train.langevin.steps` | 60 |
//! | `train.langevin.step_size` | 10.0 |
//! | `train.langevin.noise` | 0.005 |
//! | `train.langevin.grad_clip` | 0.01 |
//! | `model.spectral_norm` | false |

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compose::FinetuneConfig;
use crate::datagen::{self, PendulumConfig};
use crate::error::{EbmError, Result};
use crate::experiments::{ContinualConfig, TrajectoryConfig};
use crate::metrics::AisConfig;
use crate::model::ModelSpec;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DatasetSpec,
    #[serde(default)]
    pub ais: AisConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub continual: ContinualConfig,
    #[serde(default)]
    pub trajectory: TrajectoryConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| EbmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| EbmError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if let ModelSpec::Mlp(m) = &self.model {
            m.validate()?;
        }
        self.train.validate()
    }
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Unlabelled Gaussian mixture.
    Mixture {
        centers: Vec<Vec<f64>>,
        sigma: f64,
        n: usize,
    },
    /// Gaussian clusters whose component index is the label.
    Clusters {
        centers: Vec<Vec<f64>>,
        sigmas: Vec<f64>,
        n: usize,
    },
    Ring {
        #[serde(default = "half")]
        center_x: f64,
        #[serde(default = "half")]
        center_y: f64,
        radius: f64,
        thickness: f64,
        n: usize,
    },
    /// Pendulum transitions as `[s, s']` rows.
    Pendulum(PendulumConfig),
    /// A file written by `write_csv`.
    Csv { path: PathBuf },
}

fn half() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl DatasetSpec {
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Dataset> {
        Ok(match self {
            DatasetSpec::Mixture { centers, sigma, n } => Dataset {
                x: datagen::gaussian_mixture(centers, *sigma, *n, rng)?.0,
                labels: None,
            },
            DatasetSpec::Clusters { centers, sigmas, n } => {
                let (x, l) = datagen::gaussian_mixture_widths(centers, sigmas, *n, rng)?;
                Dataset { x, labels: Some(l) }
            }
            DatasetSpec::Ring {
                center_x,
                center_y,
                radius,
                thickness,
                n,
            } => Dataset {
                x: datagen::ring2d_at([*center_x, *center_y], *radius, *thickness, *n, rng)?,
                labels: None,
            },
            DatasetSpec::Pendulum(cfg) => Dataset {
                x: datagen::trajectory_sim(cfg, rng)?.train.pairs(),
                labels: None,
            },
            DatasetSpec::Csv { path } => {
                let (x, labels) = datagen::read_csv(std::fs::File::open(path)?)?;
                Dataset { x, labels }
            }
        })
    }

    /// Mixture centers, if the dataset has them.
    pub fn centers(&self) -> Option<&[Vec<f64>]> {
        match self {
            DatasetSpec::Mixture { centers, .. } | DatasetSpec::Clusters { centers, .. } => {
                Some(centers)
            }
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7

[model]
kind = "mlp"
widths = [2, 16, 1]

[data]
kind = "mixture"
centers = [[0.2, 0.2], [0.8, 0.8]]
sigma = 0.02
n = 100
"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.train.langevin.steps, 60);
        assert_eq!(cfg.train.batch_size, 128);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("seed = 7", "seed = 7\nsede = 8");
        assert!(matches!(
            RunConfig::from_toml(&bad),
            Err(EbmError::Config(_))
        ));
        let nested = format!("{MINIMAL}\n[train]\nlearning_rat = 0.1\n");
        assert!(RunConfig::from_toml(&nested).is_err());
        let in_langevin = format!("{MINIMAL}\n[train.langevin]\nstep = 3\n");
        assert!(RunConfig::from_toml(&in_langevin).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
}
