use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, Reduction};
use crate::networks::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Segmenter,
    Refiner,
    Gan,
}

/// Every knob of a training run. The JSON form uses these field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub dataset_root: PathBuf,
    /// Directory receiving checkpoints and the metrics log.
    pub output_dir: PathBuf,
    pub resolution: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub k_style_images: usize,
    pub style_pool_top_n: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_segmenter: f64,
    pub lr_refiner: f64,
    pub betas_adversarial: (f64, f64),
    pub betas: (f64, f64),
    pub loss_weights: LossWeights,
    pub l1_reduction: Reduction,
    /// Zero disables intermediate checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub segmenter_checkpoint: Option<PathBuf>,
    /// Ranked candidate lists produced by the ranking stage.
    pub rankings: Option<PathBuf>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Segmenter,
            dataset_root: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
            resolution: 64,
            batch_size: 8,
            steps: 2000,
            seed: 0,
            k_style_images: 4,
            style_pool_top_n: 200,
            lr_g: 1e-4,
            lr_d: 4e-4,
            lr_segmenter: 1e-3,
            lr_refiner: 2e-4,
            betas_adversarial: (0.0, 0.9),
            betas: (0.9, 0.999),
            loss_weights: LossWeights::default(),
            l1_reduction: Reduction::Mean,
            checkpoint_every: 500,
            segmenter_checkpoint: None,
            rankings: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss_weights.validate()?;
        if self.resolution != self.model.resolution {
            return Err(Error::Invalid(format!(
                "resolution {} differs from model.resolution {}",
                self.resolution, self.model.resolution
            )));
        }
        if self.batch_size == 0 || self.k_style_images == 0 || self.style_pool_top_n == 0 {
            return Err(Error::Invalid("batch_size, k_style_images and style_pool_top_n must be positive".into()));
        }
        let lrs = [self.lr_g, self.lr_d, self.lr_segmenter, self.lr_refiner];
        if lrs.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(Error::Invalid("learning rates must be positive".into()));
        }
        for (b1, b2) in [self.betas, self.betas_adversarial] {
            if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
                return Err(Error::Invalid("Adam betas must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
