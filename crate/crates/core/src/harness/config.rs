use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{RclError, Result};
use crate::model::Network;
use crate::trainer::{run_sequence, Method, RunOutcome, TrainConfig};

use super::data::{generate, DatasetConfig, TaskStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Dense layers with ReLU between them.
    Mlp { hidden: Vec<usize> },
    /// Two conv blocks and one dense layer; needs `dataset.image_shape`.
    Cnn { filters: usize, dense: usize },
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Mlp { hidden: vec![64, 64] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub out_dir: PathBuf,
    /// Seeds data generation, initialization and training.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            out_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Three two-class ring tasks in a shared low-dimensional subspace of a 16-d input,
    /// with a 16-64-64 MLP and training settings sized for a laptop.
    pub fn desk_rings(method: Method, seed: u64) -> Self {
        let mut train = TrainConfig { method, epochs: 100, lr: 0.1, seed, ..TrainConfig::default() };
        train.perturb.rho_data = 0.2;
        train.perturb.rho_weight = 0.2;
        train.loss.lambda = 0.02;
        train.loss.kappa = 1.0;
        train.rep_samples = 125;
        ExperimentConfig {
            train,
            dataset: DatasetConfig { plane_dims: 3, center_spread: 1.0, ..DatasetConfig::default() },
            model: ModelConfig::Mlp { hidden: vec![64, 64] },
            seed,
            ..ExperimentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.dataset.validate()?;
        match &self.model {
            ModelConfig::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(RclError::config("model.hidden", "layer widths must be positive"));
                }
            }
            ModelConfig::Cnn { filters, dense } => {
                if *filters == 0 || *dense == 0 {
                    return Err(RclError::config("model", "filters and dense must be positive"));
                }
                if self.dataset.image_shape.is_none() {
                    return Err(RclError::config("dataset.image_shape", "cnn models need an image shape"));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RclError::io(path, e))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| RclError::config(path.display().to_string(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The training configuration with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn build_network(&self, stream: &TaskStream) -> Result<Network> {
        let heads = stream.head_classes();
        let seed = self.seed.wrapping_add(0x5851_F42D_4C95_7F2D);
        match &self.model {
            ModelConfig::Mlp { hidden } => Network::mlp(stream.input_len, hidden, &heads, seed),
            ModelConfig::Cnn { filters, dense } => {
                let [c, h, w] = stream
                    .image_shape
                    .ok_or_else(|| RclError::config("dataset.image_shape", "cnn models need an image shape"))?;
                Network::small_cnn(c, h, w, *filters, *dense, &heads, seed)
            }
        }
    }
}

/// Generates the data, builds the network and trains every task. The record echoes the
/// whole experiment so a checkpoint can later regenerate its data.
pub fn run_experiment(exp: &ExperimentConfig) -> Result<(TaskStream, RunOutcome)> {
    exp.validate()?;
    let stream = generate(&exp.dataset, exp.seed)?;
    let net = exp.build_network(&stream)?;
    let mut outcome = run_sequence(&exp.train_config(), net, &stream)?;
    outcome.record.config = serde_json::to_value(exp)?;
    Ok((stream, outcome))
}
