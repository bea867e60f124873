use rand::Rng;

use crate::autodiff::Tape;
use crate::domain::{image_batch, GrayImage, RngSeed, SegMask};
use crate::error::{Error, Result};
use crate::losses::segmenter_loss;
use crate::networks::Segmenter;
use crate::nn::Bound;
use crate::synthdata::{DatasetIndex, Split};

use super::checkpoint::{Checkpoint, ModelKind};
use super::data::{load_labeled, mean_iou, MetricsLog};
use super::optim::Adam;
use super::{checkpoint_path, Stage, TrainConfig};

const STEP_STREAM: u64 = 0x5E6_57E9;

pub struct SegmenterRun {
    pub segmenter: Segmenter<f32>,
    pub checkpoint: Checkpoint,
    /// Loss of every step run in this call.
    pub losses: Vec<f64>,
    pub val_mean_iou: Option<f64>,
}

pub fn load_segmenter(ck: &Checkpoint) -> Result<Segmenter<f32>> {
    let mut seg = Segmenter::new(&ck.model, RngSeed(ck.train.seed))?;
    ck.restore_store("segmenter", &mut seg.params)?;
    Ok(seg)
}

/// Argmax predictions for many images, in batches.
pub fn predict_all(seg: &Segmenter<f32>, images: &[&GrayImage]) -> Result<Vec<SegMask>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        out.extend(seg.predict(chunk)?);
    }
    Ok(out)
}

fn snapshot(cfg: &TrainConfig, seg: &Segmenter<f32>, opt: &Adam, step: u64) -> Checkpoint {
    let mut ck = Checkpoint::new(ModelKind::Segmenter, cfg.model.clone(), cfg.clone(), step);
    ck.add_store("segmenter", &seg.params);
    ck.add_optimizer("segmenter", &seg.params, opt);
    ck
}

/// Minimize pixel-wise cross-entropy on the labeled training split.
pub fn train_segmenter(cfg: &TrainConfig, resume: Option<&Checkpoint>) -> Result<SegmenterRun> {
    cfg.validate()?;
    let index = DatasetIndex::load(&cfg.dataset_root)?;
    let train = load_labeled(&index, &cfg.dataset_root, Split::Train)?;
    if train.is_empty() {
        return Err(Error::Empty("labeled training split"));
    }
    let val = load_labeled(&index, &cfg.dataset_root, Split::Val)?;
    let mut seg = Segmenter::<f32>::new(&cfg.model, RngSeed(cfg.seed))?;
    let mut opt = Adam::new(&seg.params, cfg.lr_segmenter, cfg.betas);
    let mut start = 0;
    if let Some(ck) = resume {
        let ck = ck.clone().expect_kind(ModelKind::Segmenter)?;
        ck.restore_store("segmenter", &mut seg.params)?;
        ck.restore_optimizer("segmenter", &seg.params, &mut opt)?;
        start = ck.step;
    }
    let mut log = MetricsLog::open(&cfg.output_dir.join("metrics.jsonl"), resume.is_some())?;
    let mut losses = Vec::new();
    for step in start..cfg.steps {
        let mut rng = RngSeed(cfg.seed).derive(&[STEP_STREAM, step]).rng();
        let batch: Vec<&_> = (0..cfg.batch_size).map(|_| &train[rng.gen_range(0..train.len())]).collect();
        let images: Vec<&GrayImage> = batch.iter().map(|b| &b.image).collect();
        let masks: Vec<&SegMask> = batch.iter().map(|b| &b.mask).collect();
        let tape = Tape::new();
        let b = Bound::new(&tape, &seg.params, true);
        let logits = seg.forward(&b, tape.constant(image_batch(&images)?))?;
        let loss = segmenter_loss(logits, &masks)?;
        let value = loss.item() as f64;
        let mut grads = tape.backward(loss);
        let grads = b.gradients(&mut grads);
        drop(b);
        opt.update(&mut seg.params, &grads);
        losses.push(value);
        log.write_line(&serde_json::json!({ "step": step, "loss": value }).to_string())?;
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
            snapshot(cfg, &seg, &opt, step + 1).save(&checkpoint_path(cfg, Stage::Segmenter, Some(step + 1)))?;
        }
    }
    log.flush()?;
    let checkpoint = snapshot(cfg, &seg, &opt, cfg.steps.max(start));
    checkpoint.save(&checkpoint_path(cfg, Stage::Segmenter, None))?;
    let val_mean_iou = if val.is_empty() {
        None
    } else {
        let images: Vec<&GrayImage> = val.iter().map(|v| &v.image).collect();
        let truth: Vec<SegMask> = val.iter().map(|v| v.mask.clone()).collect();
        Some(mean_iou(&predict_all(&seg, &images)?, &truth, cfg.model.num_classes)?)
    };
    Ok(SegmenterRun { segmenter: seg, checkpoint, losses, val_mean_iou })
}
