//! Deterministic training loops, the optimizer, and checkpointing.
//!
//! Every random decision of step `t` is drawn from a generator seeded by
//! `(seed, t)`, so a run resumed from a checkpoint continues exactly as the
//! uninterrupted run would have.

pub mod checkpoint;
mod config;
mod data;
mod gan;
mod optim;
mod refiner;
mod segmenter;

use std::path::PathBuf;

pub use checkpoint::{Checkpoint, CheckpointError, ModelKind};
pub use config::{Stage, TrainConfig};
pub use data::{load_labeled, mean_iou, sample_styles, style_pool, MetricsLog};
pub use gan::{train_gan, GanBatch, GanItem, GanModels, GanRun, GanTrainer};
pub use optim::Adam;
pub use refiner::{evaluate_refiner, load_refiner, refiner_samples, train_refiner, RefinerRun, RefinerSample};
pub use segmenter::{load_segmenter, predict_all, train_segmenter, SegmenterRun};

/// `<output_dir>/<stage>.ckpt`, or `<output_dir>/<stage>_<step>.ckpt` for
/// intermediate checkpoints.
pub fn checkpoint_path(cfg: &TrainConfig, stage: Stage, step: Option<u64>) -> PathBuf {
    let name = match stage {
        Stage::Segmenter => "segmenter",
        Stage::Refiner => "refiner",
        Stage::Gan => "gan",
    };
    match step {
        Some(s) => cfg.output_dir.join(format!("{name}_{s}.ckpt")),
        None => cfg.output_dir.join(format!("{name}.ckpt")),
    }
}
