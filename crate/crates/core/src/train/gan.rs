use log::warn;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::domain::{image_batch, one_hot_batch, GrayImage, RngSeed, SegMask, StyleCode};
use crate::error::{Error, Result};
use crate::losses::{
    feature_matching_loss, gan_loss_d, gan_loss_g, generator_objective_var, gram_loss, l2_pixel_loss, style_code_loss,
    LossReport, LossTerms,
};
use crate::networks::{aggregate_styles, Discriminator, Generator, ModelConfig, StyleEncoder};
use crate::nn::Bound;
use crate::ranking::Rankings;
use crate::synthdata::{DatasetIndex, Split};
use crate::tensor::Tensor;

use super::checkpoint::{Checkpoint, ModelKind};
use super::data::{load_labeled, load_rankings, sample_styles, style_pool, ImageCache, MetricsLog};
use super::optim::Adam;
use super::{checkpoint_path, Stage, TrainConfig};

const STEP_STREAM: u64 = 0x6A4_57E9;

/// Generator, style encoder and discriminator trained together.
#[derive(Clone, Debug)]
pub struct GanModels {
    pub generator: Generator<f32>,
    pub encoder: StyleEncoder<f32>,
    pub discriminator: Discriminator<f32>,
}

impl GanModels {
    pub fn new(cfg: &ModelConfig, seed: RngSeed) -> Result<Self> {
        Ok(GanModels {
            generator: Generator::new(cfg, seed)?,
            encoder: StyleEncoder::new(cfg, seed)?,
            discriminator: Discriminator::new(cfg, seed)?,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != ModelKind::Gan {
            return Err(super::CheckpointError::KindMismatch { expected: ModelKind::Gan, found: ck.kind }.into());
        }
        let mut m = GanModels::new(&ck.model, RngSeed(ck.train.seed))?;
        ck.restore_store("generator", &mut m.generator.params)?;
        ck.restore_store("encoder", &mut m.encoder.params)?;
        ck.restore_store("discriminator", &mut m.discriminator.params)?;
        Ok(m)
    }

    /// Element-wise maximum of the codes of the given style images. Images
    /// are encoded one at a time so the result does not depend on their order.
    pub fn style_code(&self, images: &[&GrayImage]) -> Result<StyleCode> {
        let codes = images.iter().map(|img| Ok(self.encoder.encode(img)?.0)).collect::<Result<Vec<_>>>()?;
        aggregate_styles(&codes)
    }

    pub fn generate(&self, mask: &SegMask, style_images: &[&GrayImage]) -> Result<GrayImage> {
        self.generator.generate(mask, &self.style_code(style_images)?)
    }
}

/// A labeled target with its style pool.
#[derive(Clone, Debug)]
pub struct GanItem {
    pub person: u64,
    pub img: String,
    pub image: GrayImage,
    pub mask: SegMask,
    pub pool: Vec<String>,
}

/// Tensors of one training batch.
pub struct GanBatch {
    pub masks: Tensor<f32>,
    pub targets: Tensor<f32>,
    /// `[N*k, 1, H, W]`, the `k` style images of each sample consecutive.
    pub styles: Tensor<f32>,
    pub k: usize,
}

fn items_for(index: &DatasetIndex, cfg: &TrainConfig, rankings: &Rankings, split: Split) -> Result<Vec<GanItem>> {
    let mut out = Vec::new();
    for item in load_labeled(index, &cfg.dataset_root, split)? {
        let pool = rankings.get(&item.img).map(|l| style_pool(l, &item.img, cfg.style_pool_top_n)).unwrap_or_default();
        if pool.is_empty() {
            warn!("no style pool for {}; skipped", item.img);
            continue;
        }
        out.push(GanItem { person: item.person, img: item.img, image: item.image, mask: item.mask, pool });
    }
    Ok(out)
}

struct Forward<'t> {
    fake: Var<'t, f32>,
    style_target: Var<'t, f32>,
    style_fake: Var<'t, f32>,
    fake_feats: Vec<Var<'t, f32>>,
    real_feats: Vec<Var<'t, f32>>,
}

fn forward<'t>(
    m: &GanModels,
    g: &Bound<'t, '_, f32>,
    e: &Bound<'t, '_, f32>,
    e_frozen: &Bound<'t, '_, f32>,
    batch: &GanBatch,
) -> Result<Forward<'t>> {
    let tape = g.tape();
    let (codes, _) = m.encoder.forward(e, tape.constant(batch.styles.clone()))?;
    let style_target = codes.group_max(batch.k);
    let fake = m.generator.forward(g, &batch.masks, style_target)?;
    let (style_fake, fake_feats) = m.encoder.forward(e, fake)?;
    let (_, real_feats) = m.encoder.forward(e_frozen, tape.constant(batch.targets.clone()))?;
    Ok(Forward { fake, style_target, style_fake, fake_feats, real_feats })
}

fn objective<'t>(
    m: &GanModels,
    cfg: &TrainConfig,
    d: &Bound<'t, '_, f32>,
    f: &Forward<'t>,
    batch: &GanBatch,
) -> Result<(Var<'t, f32>, LossReport)> {
    let tape = d.tape();
    let fake_out = m.discriminator.forward(d, &batch.masks, f.fake)?;
    let real_out = m.discriminator.forward(d, &batch.masks, tape.constant(batch.targets.clone()))?;
    let fake_logits: Vec<_> = fake_out.iter().map(|o| o.logits).collect();
    let fake_feats: Vec<_> = fake_out.into_iter().map(|o| o.features).collect();
    let real_feats: Vec<_> = real_out.into_iter().map(|o| o.features).collect();
    let terms = LossTerms {
        gan: Some(gan_loss_g(&fake_logits)?),
        feature_matching: Some(feature_matching_loss(&fake_feats, &real_feats, cfg.l1_reduction)?),
        l2: Some(l2_pixel_loss(f.fake, tape.constant(batch.targets.clone()))?),
        style: Some(style_code_loss(f.style_target, f.style_fake)?),
        gram: Some(gram_loss(&f.fake_feats, &f.real_feats, cfg.l1_reduction)?),
    };
    generator_objective_var(&terms, &cfg.loss_weights)
}

fn discriminator_step(
    d: &mut Discriminator<f32>,
    opt: &mut Adam,
    batch: &GanBatch,
    fake: &Tensor<f32>,
) -> Result<f64> {
    let tape = Tape::new();
    let b = Bound::new(&tape, &d.params, true);
    let real = d.forward(&b, &batch.masks, tape.constant(batch.targets.clone()))?;
    let fake = d.forward(&b, &batch.masks, tape.constant(fake.clone()))?;
    let real: Vec<_> = real.iter().map(|o| o.logits).collect();
    let fake: Vec<_> = fake.iter().map(|o| o.logits).collect();
    let loss = gan_loss_d(&real, &fake)?;
    let value = loss.item() as f64;
    let mut grads = tape.backward(loss);
    let grads = b.gradients(&mut grads);
    drop(b);
    opt.update(&mut d.params, &grads);
    Ok(value)
}

/// State of an adversarial training run.
pub struct GanTrainer {
    pub cfg: TrainConfig,
    pub models: GanModels,
    pub opt_g: Adam,
    pub opt_e: Adam,
    pub opt_d: Adam,
    pub train: Vec<GanItem>,
    pub val: Vec<GanItem>,
    pub step: u64,
    images: ImageCache,
}

impl GanTrainer {
    pub fn new(cfg: &TrainConfig, resume: Option<&Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        let index = DatasetIndex::load(&cfg.dataset_root)?;
        let rankings = load_rankings(cfg.rankings.as_deref())?;
        let train = items_for(&index, cfg, &rankings, Split::Train)?;
        if train.is_empty() {
            return Err(Error::Empty("GAN training pairs with a style pool"));
        }
        let val = items_for(&index, cfg, &rankings, Split::Val)?;
        let mut images = ImageCache::new(&cfg.dataset_root);
        for item in train.iter().chain(&val) {
            for p in &item.pool {
                images.load(p)?;
            }
        }
        let models = GanModels::new(&cfg.model, RngSeed(cfg.seed))?;
        let mut t = GanTrainer {
            opt_g: Adam::new(&models.generator.params, cfg.lr_g, cfg.betas_adversarial),
            opt_e: Adam::new(&models.encoder.params, cfg.lr_g, cfg.betas_adversarial),
            opt_d: Adam::new(&models.discriminator.params, cfg.lr_d, cfg.betas_adversarial),
            cfg: cfg.clone(),
            models,
            train,
            val,
            step: 0,
            images,
        };
        if let Some(ck) = resume {
            let ck = ck.clone().expect_kind(ModelKind::Gan)?;
            let m = &mut t.models;
            ck.restore_store("generator", &mut m.generator.params)?;
            ck.restore_store("encoder", &mut m.encoder.params)?;
            ck.restore_store("discriminator", &mut m.discriminator.params)?;
            ck.restore_optimizer("generator", &m.generator.params, &mut t.opt_g)?;
            ck.restore_optimizer("encoder", &m.encoder.params, &mut t.opt_e)?;
            ck.restore_optimizer("discriminator", &m.discriminator.params, &mut t.opt_d)?;
            t.step = ck.step;
        }
        Ok(t)
    }

    /// The batch drawn at `step`; a pure function of the seed and the step.
    pub fn batch(&self, step: u64) -> Result<GanBatch> {
        let k = self.cfg.k_style_images;
        let mut rng = RngSeed(self.cfg.seed).derive(&[STEP_STREAM, step]).rng();
        let picks: Vec<&GanItem> = (0..self.cfg.batch_size).map(|_| &self.train[rng.gen_range(0..self.train.len())]).collect();
        let mut styles = Vec::with_capacity(picks.len() * k);
        for item in &picks {
            styles.extend(sample_styles(&item.pool, k, &mut rng).into_iter().map(|p| self.images.get(p)));
        }
        Ok(GanBatch {
            masks: one_hot_batch(&picks.iter().map(|i| &i.mask).collect::<Vec<_>>(), self.cfg.model.num_classes)?,
            targets: image_batch(&picks.iter().map(|i| &i.image).collect::<Vec<_>>())?,
            styles: image_batch(&styles)?,
            k,
        })
    }

    /// Generator objective on a batch without changing any state.
    pub fn evaluate(&self, batch: &GanBatch) -> Result<LossReport> {
        let tape = Tape::new();
        let m = &self.models;
        let g = Bound::new(&tape, &m.generator.params, false);
        let e = Bound::new(&tape, &m.encoder.params, false);
        let d = Bound::new(&tape, &m.discriminator.params, false);
        let f = forward(m, &g, &e, &e, batch)?;
        Ok(objective(m, &self.cfg, &d, &f, batch)?.1)
    }

    /// One update of generator and encoder on a fixed batch, with the
    /// discriminator and spectral estimates left as they are.
    pub fn generator_update(&mut self, batch: &GanBatch) -> Result<LossReport> {
        let (report, grads_g, grads_e) = {
            let tape = Tape::new();
            let m = &self.models;
            let g = Bound::new(&tape, &m.generator.params, true);
            let e = Bound::new(&tape, &m.encoder.params, true);
            let ef = Bound::new(&tape, &m.encoder.params, false);
            let d = Bound::new(&tape, &m.discriminator.params, false);
            let f = forward(m, &g, &e, &ef, batch)?;
            let (total, report) = objective(m, &self.cfg, &d, &f, batch)?;
            let mut grads = tape.backward(total);
            (report, g.gradients(&mut grads), e.gradients(&mut grads))
        };
        self.opt_g.update(&mut self.models.generator.params, &grads_g);
        self.opt_e.update(&mut self.models.encoder.params, &grads_e);
        Ok(report)
    }

    /// A full training step: refresh spectral estimates, generate, update the
    /// discriminator on the detached fake, then update generator and encoder
    /// against the updated discriminator. Returns the generator report and
    /// the discriminator loss.
    pub fn train_step(&mut self) -> Result<(LossReport, f64)> {
        let batch = self.batch(self.step)?;
        let m = &mut self.models;
        m.generator.params.update_spectral();
        m.encoder.params.update_spectral();
        m.discriminator.params.update_spectral();
        let tape = Tape::new();
        let (g, e, ef) = (
            Bound::new(&tape, &m.generator.params, true),
            Bound::new(&tape, &m.encoder.params, true),
            Bound::new(&tape, &m.encoder.params, false),
        );
        let f = forward(m, &g, &e, &ef, &batch)?;
        let fake = f.fake.value();
        let d_loss = discriminator_step(&mut m.discriminator, &mut self.opt_d, &batch, &fake)?;
        let d = Bound::new(&tape, &m.discriminator.params, false);
        let (total, report) = objective(m, &self.cfg, &d, &f, &batch)?;
        let mut grads = tape.backward(total);
        let (grads_g, grads_e) = (g.gradients(&mut grads), e.gradients(&mut grads));
        drop((g, e, ef, d));
        self.opt_g.update(&mut m.generator.params, &grads_g);
        self.opt_e.update(&mut m.encoder.params, &grads_e);
        self.step += 1;
        Ok((report, d_loss))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let m = &self.models;
        let mut ck = Checkpoint::new(ModelKind::Gan, self.cfg.model.clone(), self.cfg.clone(), self.step);
        ck.add_store("generator", &m.generator.params);
        ck.add_store("encoder", &m.encoder.params);
        ck.add_store("discriminator", &m.discriminator.params);
        ck.add_optimizer("generator", &m.generator.params, &self.opt_g);
        ck.add_optimizer("encoder", &m.encoder.params, &self.opt_e);
        ck.add_optimizer("discriminator", &m.discriminator.params, &self.opt_d);
        ck
    }

    /// The first `k` pool entries of an item (cycled when the pool is short).
    pub fn eval_styles(&self, item: &GanItem) -> Vec<&GrayImage> {
        (0..self.cfg.k_style_images).map(|i| self.images.get(&item.pool[i % item.pool.len()])).collect()
    }

    /// Generated image for every validation item, using its best-ranked styles.
    pub fn val_generations(&self) -> Result<Vec<GrayImage>> {
        self.val.iter().map(|item| self.models.generate(&item.mask, &self.eval_styles(item))).collect()
    }

    /// Mean pixel MSE of validation generations against their targets.
    pub fn val_l2(&self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let gens = self.val_generations()?;
        let total: f64 = gens
            .iter()
            .zip(&self.val)
            .map(|(g, item)| {
                g.data().iter().zip(item.image.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>()
                    / g.data().len() as f64
            })
            .sum();
        Ok(Some(total / self.val.len() as f64))
    }
}

pub struct GanRun {
    pub trainer: GanTrainer,
    pub checkpoint: Checkpoint,
    pub reports: Vec<LossReport>,
    pub val_l2_start: Option<f64>,
    pub val_l2_end: Option<f64>,
}

/// Alternating discriminator / generator training with metrics logging.
pub fn train_gan(cfg: &TrainConfig, resume: Option<&Checkpoint>) -> Result<GanRun> {
    let mut trainer = GanTrainer::new(cfg, resume)?;
    let val_l2_start = trainer.val_l2()?;
    let mut log = MetricsLog::open(&cfg.output_dir.join("metrics.jsonl"), resume.is_some())?;
    let mut reports = Vec::new();
    while trainer.step < cfg.steps {
        let step = trainer.step;
        let (report, d_loss) = trainer.train_step()?;
        let mut line: serde_json::Value = serde_json::from_str(&report.to_json_line(step)).expect("valid JSON");
        line["d_loss"] = d_loss.into();
        log.write_line(&line.to_string())?;
        reports.push(report);
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 && trainer.step < cfg.steps {
            trainer.checkpoint().save(&checkpoint_path(cfg, Stage::Gan, Some(trainer.step)))?;
        }
    }
    log.flush()?;
    let checkpoint = trainer.checkpoint();
    checkpoint.save(&checkpoint_path(cfg, Stage::Gan, None))?;
    let val_l2_end = trainer.val_l2()?;
    Ok(GanRun { trainer, checkpoint, reports, val_l2_start, val_l2_end })
}
