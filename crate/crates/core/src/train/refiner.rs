use log::warn;
use rand::Rng;

use crate::autodiff::Tape;
use crate::domain::{image_batch, GrayImage, RngSeed, SegMask};
use crate::error::{Error, Result};
use crate::losses::{challenge_metric, refiner_loss};
use crate::networks::Refiner;
use crate::nn::Bound;
use crate::ranking::{PseudoLabeler, Rankings};
use crate::synthdata::{DatasetIndex, Split};
use crate::tensor::Tensor;

use super::checkpoint::{Checkpoint, ModelKind};
use super::data::{load_labeled, load_rankings, MetricsLog};
use super::optim::Adam;
use super::segmenter::load_segmenter;
use super::{checkpoint_path, Stage, TrainConfig};

const STEP_STREAM: u64 = 0x2EF_57E9;

/// One refiner example: target mask and image plus the rank-1 reference and
/// its pseudo-label.
#[derive(Clone, Debug)]
pub struct RefinerSample {
    pub target_img: String,
    pub target_mask: SegMask,
    pub target: GrayImage,
    pub reference_img: String,
    pub reference_mask: SegMask,
    pub reference: GrayImage,
}

pub struct RefinerRun {
    pub refiner: Refiner<f32>,
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
    /// Mean challenge metric of refined outputs on the validation split.
    pub val_refined: Option<f64>,
    /// Mean challenge metric of the unmodified references.
    pub val_reference: Option<f64>,
}

pub fn load_refiner(ck: &Checkpoint) -> Result<Refiner<f32>> {
    let mut r = Refiner::new(&ck.model, RngSeed(ck.train.seed))?;
    ck.restore_store("refiner", &mut r.params)?;
    Ok(r)
}

/// Build samples for a split, using the best-ranked candidate of each target.
/// Targets without a ranking are skipped with a warning.
pub fn refiner_samples(
    index: &DatasetIndex,
    cfg: &TrainConfig,
    rankings: &Rankings,
    labeler: &PseudoLabeler<'_>,
    split: Split,
) -> Result<Vec<RefinerSample>> {
    let mut out = Vec::new();
    for item in load_labeled(index, &cfg.dataset_root, split)? {
        let Some(best) = rankings.get(&item.img).and_then(|l| l.0.iter().find(|e| e.img != item.img)) else {
            warn!("no ranking for {}; skipped", item.img);
            continue;
        };
        let reference_mask = labeler.labels(&[best.img.as_str()])?.remove(0);
        out.push(RefinerSample {
            target_img: item.img,
            target_mask: item.mask,
            target: item.image,
            reference_img: best.img.clone(),
            reference_mask,
            reference: GrayImage::read_png(&cfg.dataset_root.join(&best.img))?,
        });
    }
    Ok(out)
}

/// Mean challenge metric of refined outputs and of bare references.
pub fn evaluate_refiner(refiner: &Refiner<f32>, samples: &[RefinerSample]) -> Result<(f64, f64)> {
    let (mut refined, mut baseline) = (0.0, 0.0);
    for s in samples {
        let (_, out) = refiner.refine(&s.target_mask, &s.reference_mask, &s.reference)?;
        refined += challenge_metric(&out, &s.target)?;
        baseline += challenge_metric(&s.reference, &s.target)?;
    }
    let n = samples.len() as f64;
    Ok((refined / n, baseline / n))
}

fn snapshot(cfg: &TrainConfig, r: &Refiner<f32>, opt: &Adam, step: u64) -> Checkpoint {
    let mut ck = Checkpoint::new(ModelKind::Refiner, cfg.model.clone(), cfg.clone(), step);
    ck.add_store("refiner", &r.params);
    ck.add_optimizer("refiner", &r.params, opt);
    ck
}

/// Minimize the squared error between `reference + residual` and the target.
pub fn train_refiner(cfg: &TrainConfig, resume: Option<&Checkpoint>) -> Result<RefinerRun> {
    cfg.validate()?;
    let index = DatasetIndex::load(&cfg.dataset_root)?;
    let rankings = load_rankings(cfg.rankings.as_deref())?;
    let seg_path = cfg
        .segmenter_checkpoint
        .as_deref()
        .ok_or_else(|| Error::Invalid("refiner training needs `segmenter_checkpoint`".into()))?;
    let seg_ck = Checkpoint::load_kind(seg_path, ModelKind::Segmenter)?;
    let segmenter = load_segmenter(&seg_ck)?;
    let cache = PseudoLabeler::default_cache_dir(&cfg.dataset_root);
    let labeler = PseudoLabeler::new(&segmenter, &seg_ck.content_hash(), &cfg.dataset_root, Some(&cache));
    let train = refiner_samples(&index, cfg, &rankings, &labeler, Split::Train)?;
    if train.is_empty() {
        return Err(Error::Empty("refiner samples (every training target lacked a ranking)"));
    }
    let val = refiner_samples(&index, cfg, &rankings, &labeler, Split::Val)?;

    let mut refiner = Refiner::<f32>::new(&cfg.model, RngSeed(cfg.seed))?;
    let mut opt = Adam::new(&refiner.params, cfg.lr_refiner, cfg.betas);
    let mut start = 0;
    if let Some(ck) = resume {
        let ck = ck.clone().expect_kind(ModelKind::Refiner)?;
        ck.restore_store("refiner", &mut refiner.params)?;
        ck.restore_optimizer("refiner", &refiner.params, &mut opt)?;
        start = ck.step;
    }
    let inputs: Vec<Tensor<f32>> = train
        .iter()
        .map(|s| refiner.input(&[&s.target_mask], &[&s.reference_mask], &[&s.reference]))
        .collect::<Result<_>>()?;
    let mut log = MetricsLog::open(&cfg.output_dir.join("metrics.jsonl"), resume.is_some())?;
    let mut losses = Vec::new();
    for step in start..cfg.steps {
        let mut rng = RngSeed(cfg.seed).derive(&[STEP_STREAM, step]).rng();
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..train.len())).collect();
        let input = Tensor::concat_batch(&picks.iter().map(|&i| &inputs[i]).collect::<Vec<_>>());
        let references = image_batch::<f32>(&picks.iter().map(|&i| &train[i].reference).collect::<Vec<_>>())?;
        let targets = image_batch::<f32>(&picks.iter().map(|&i| &train[i].target).collect::<Vec<_>>())?;
        let tape = Tape::new();
        let b = Bound::new(&tape, &refiner.params, true);
        let residual = refiner.forward(&b, tape.constant(input))?;
        let refined = tape.constant(references) + residual;
        let loss = refiner_loss(refined, tape.constant(targets))?;
        let value = loss.item() as f64;
        let mut grads = tape.backward(loss);
        let grads = b.gradients(&mut grads);
        drop(b);
        opt.update(&mut refiner.params, &grads);
        losses.push(value);
        log.write_line(&serde_json::json!({ "step": step, "loss": value }).to_string())?;
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
            snapshot(cfg, &refiner, &opt, step + 1).save(&checkpoint_path(cfg, Stage::Refiner, Some(step + 1)))?;
        }
    }
    log.flush()?;
    let checkpoint = snapshot(cfg, &refiner, &opt, cfg.steps.max(start));
    checkpoint.save(&checkpoint_path(cfg, Stage::Refiner, None))?;
    let (val_refined, val_reference) = if val.is_empty() {
        (None, None)
    } else {
        let (r, b) = evaluate_refiner(&refiner, &val)?;
        (Some(r), Some(b))
    };
    Ok(RefinerRun { refiner, checkpoint, losses, val_refined, val_reference })
}
