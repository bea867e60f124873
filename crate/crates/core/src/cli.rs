//! Command-line interface. Usage errors exit with 2, runtime errors with 1.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use crate::domain::{GrayImage, SegMask};
use crate::losses::challenge_metric;
use crate::ranking::{dataset_class_means, rank_dataset, PseudoLabeler};
use crate::synthdata::{build_dataset, DatasetConfig, DatasetIndex};
use crate::train::{
    load_refiner, load_segmenter, train_gan, train_refiner, train_segmenter, Checkpoint, GanModels, ModelKind, Stage,
    TrainConfig,
};

/// Columns of every image grid written by the CLI.
pub const GRID_COLUMNS: usize = 4;

#[derive(Debug, Parser)]
#[command(name = "seg2eye", version, about = "Synthesize and refine eye images from segmentation masks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic eye dataset.
    SynthData(SynthDataArgs),
    /// Train the segmenter used for pseudo-labels.
    TrainSeg(TrainArgs),
    /// Fill the pseudo-label cache for every unlabeled image.
    PseudoLabel(PseudoLabelArgs),
    /// Rank each labeled image's same-person pool by mask similarity.
    Rank(RankArgs),
    /// Train the residual refiner.
    TrainRefiner(TrainArgs),
    /// Train the style-consistent generator.
    TrainGan(TrainArgs),
    /// Generate one image from a mask and style images.
    Generate(GenerateArgs),
    /// Decode a linear walk between two style codes.
    Interpolate(InterpolateArgs),
    /// Refine a reference image towards a target mask.
    Refine(RefineArgs),
    /// Score predicted images against targets.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthDataArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub persons: usize,
    #[arg(long, default_value_t = 20)]
    pub images_per_person: usize,
    #[arg(long, default_value_t = 0.5)]
    pub labeled_fraction: f64,
    #[arg(long, default_value_t = 0.15)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0.15)]
    pub test_fraction: f64,
    #[arg(long)]
    pub identity_disjoint: bool,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Flags shared by the training commands. Flags override the config file.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON file with `TrainConfig` fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub segmenter: Option<PathBuf>,
    #[arg(long)]
    pub rankings: Option<PathBuf>,
    /// Continue from a checkpoint of the same stage.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PseudoLabelArgs {
    /// Segmenter checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// Segmenter checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub style_images: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Print the challenge metric against this image.
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub style_a: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    pub style_b: Vec<PathBuf>,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(2..))]
    pub steps: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Refiner checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub target_mask: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Mask of the reference image, e.g. its pseudo-label.
    #[arg(long)]
    pub reference_mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Residual map, with zero at gray 128.
    #[arg(long)]
    pub residual_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub target_dir: PathBuf,
}

/// Parse `args` and run the command, returning the process exit code.
pub fn main_with_args<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::SynthData(a) => synth_data(a),
        Command::TrainSeg(a) => train(a, Stage::Segmenter),
        Command::PseudoLabel(a) => pseudo_label(a),
        Command::Rank(a) => rank(a),
        Command::TrainRefiner(a) => train(a, Stage::Refiner),
        Command::TrainGan(a) => train(a, Stage::Gan),
        Command::Generate(a) => generate(a),
        Command::Interpolate(a) => interpolate(a),
        Command::Refine(a) => refine(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

fn synth_data(a: SynthDataArgs) -> anyhow::Result<()> {
    let cfg = DatasetConfig {
        out_dir: a.out_dir,
        persons: a.persons,
        images_per_person: a.images_per_person,
        labeled_fraction: a.labeled_fraction,
        val_fraction: a.val_fraction,
        test_fraction: a.test_fraction,
        identity_disjoint: a.identity_disjoint,
        resolution: a.resolution,
        seed: a.seed,
    };
    let index = build_dataset(&cfg)?;
    let images: usize = index.persons.iter().map(|p| p.records.len()).sum();
    println!("wrote {images} images of {} persons to {}", index.persons.len(), cfg.out_dir.display());
    Ok(())
}

fn train_config(a: &TrainArgs, stage: Stage) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.stage = stage;
    if let Some(d) = &a.dataset {
        cfg.dataset_root = d.clone();
    }
    if let Some(o) = &a.out_dir {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.segmenter.is_some() {
        cfg.segmenter_checkpoint = a.segmenter.clone();
    }
    if a.rankings.is_some() {
        cfg.rankings = a.rankings.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs, stage: Stage) -> anyhow::Result<()> {
    let cfg = train_config(&a, stage)?;
    let kind = match stage {
        Stage::Segmenter => ModelKind::Segmenter,
        Stage::Refiner => ModelKind::Refiner,
        Stage::Gan => ModelKind::Gan,
    };
    let resume = a.resume.as_deref().map(|p| Checkpoint::load_kind(p, kind)).transpose()?;
    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    cfg.save(&cfg.output_dir.join("config.json"))?;
    let ckpt = crate::train::checkpoint_path(&cfg, stage, None);
    let summary = match stage {
        Stage::Segmenter => {
            let run = train_segmenter(&cfg, resume.as_ref())?;
            json!({ "checkpoint": ckpt, "final_loss": run.losses.last(), "val_mean_iou": run.val_mean_iou })
        }
        Stage::Refiner => {
            let run = train_refiner(&cfg, resume.as_ref())?;
            json!({
                "checkpoint": ckpt,
                "final_loss": run.losses.last(),
                "val_refined": run.val_refined,
                "val_reference": run.val_reference,
            })
        }
        Stage::Gan => {
            let run = train_gan(&cfg, resume.as_ref())?;
            let frames = run.trainer.val_generations()?;
            if !frames.is_empty() {
                image_grid(&frames, GRID_COLUMNS)?.write_png(&cfg.output_dir.join("val_grid.png"))?;
            }
            json!({
                "checkpoint": ckpt,
                "final_total": run.reports.last().map(|r| r.total),
                "val_l2_start": run.val_l2_start,
                "val_l2_end": run.val_l2_end,
            })
        }
    };
    println!("{summary}");
    Ok(())
}

fn labeler_parts(checkpoint: &Path) -> anyhow::Result<(crate::networks::Segmenter<f32>, String)> {
    let ck = Checkpoint::load_kind(checkpoint, ModelKind::Segmenter)?;
    Ok((load_segmenter(&ck)?, ck.content_hash()))
}

fn pseudo_label(a: PseudoLabelArgs) -> anyhow::Result<()> {
    let index = DatasetIndex::load(&a.dataset)?;
    let (seg, hash) = labeler_parts(&a.checkpoint)?;
    let cache = a.cache_dir.unwrap_or_else(|| PseudoLabeler::default_cache_dir(&a.dataset));
    let labeler = PseudoLabeler::new(&seg, &hash, &a.dataset, Some(&cache));
    let mut count = 0;
    for p in &index.persons {
        let pool: Vec<&str> = index.unlabeled_pool(p.id).iter().map(|r| r.img.as_str()).collect();
        count += labeler.labels(&pool)?.len();
    }
    println!("pseudo-labeled {count} images into {}", cache.join(&hash).display());
    Ok(())
}

fn rank(a: RankArgs) -> anyhow::Result<()> {
    let index = DatasetIndex::load(&a.dataset)?;
    let (seg, hash) = labeler_parts(&a.checkpoint)?;
    let cache = a.cache_dir.unwrap_or_else(|| PseudoLabeler::default_cache_dir(&a.dataset));
    let labeler = PseudoLabeler::new(&seg, &hash, &a.dataset, Some(&cache));
    let means = dataset_class_means(&index, &a.dataset)?;
    let rankings = rank_dataset(&index, &a.dataset, &labeler, &means)?;
    rankings.save(&a.out)?;
    println!("ranked {} targets into {}", rankings.0.len(), a.out.display());
    Ok(())
}

fn read_images(paths: &[PathBuf]) -> anyhow::Result<Vec<GrayImage>> {
    paths.iter().map(|p| Ok(GrayImage::read_png(p)?)).collect()
}

fn gan_models(path: &Path) -> anyhow::Result<GanModels> {
    Ok(GanModels::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let models = gan_models(&a.checkpoint)?;
    let mask = SegMask::read_png(&a.mask)?;
    let styles = read_images(&a.style_images)?;
    let out = models.generate(&mask, &styles.iter().collect::<Vec<_>>())?;
    out.write_png(&a.out)?;
    info!("wrote {}", a.out.display());
    if let Some(t) = &a.target {
        let metric = challenge_metric(&GrayImage::read_png(&a.out)?, &GrayImage::read_png(t)?)?;
        println!("challenge_metric: {metric}");
    }
    Ok(())
}

/// Frames decoded along `(1 - a) * s_a + a * s_b` for `a = i / (n - 1)`.
pub fn interpolation_frames(
    models: &GanModels,
    mask: &SegMask,
    style_a: &[&GrayImage],
    style_b: &[&GrayImage],
    n: usize,
) -> crate::Result<Vec<GrayImage>> {
    if n < 2 {
        return Err(crate::Error::Invalid(format!("interpolation needs at least 2 frames, got {n}")));
    }
    let (sa, sb) = (models.style_code(style_a)?, models.style_code(style_b)?);
    (0..n)
        .map(|i| {
            let alpha = i as f32 / (n - 1) as f32;
            models.generator.generate(mask, &sa.lerp(&sb, alpha))
        })
        .collect()
}

/// Mean absolute difference of two images in 8-bit units.
pub fn mean_abs_diff(a: &GrayImage, b: &GrayImage) -> f64 {
    let (pa, pb) = (a.to_u8(), b.to_u8());
    pa.iter().zip(&pb).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / pa.len() as f64
}

/// Whether every step of the walk changes the image less than the whole walk.
pub fn walk_is_continuous(frames: &[GrayImage]) -> bool {
    let total = mean_abs_diff(&frames[0], &frames[frames.len() - 1]);
    frames.windows(2).all(|w| mean_abs_diff(&w[0], &w[1]) < total)
}

fn interpolate(a: InterpolateArgs) -> anyhow::Result<()> {
    let models = gan_models(&a.checkpoint)?;
    let mask = SegMask::read_png(&a.mask)?;
    let (sa, sb) = (read_images(&a.style_a)?, read_images(&a.style_b)?);
    let frames = interpolation_frames(
        &models,
        &mask,
        &sa.iter().collect::<Vec<_>>(),
        &sb.iter().collect::<Vec<_>>(),
        a.steps as usize,
    )?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for (i, f) in frames.iter().enumerate() {
        f.write_png(&a.out_dir.join(format!("frame_{i:03}.png")))?;
    }
    image_grid(&frames, GRID_COLUMNS)?.write_png(&a.out_dir.join("grid.png"))?;
    println!("wrote {} frames to {}", frames.len(), a.out_dir.display());
    Ok(())
}

fn refine(a: RefineArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load_kind(&a.checkpoint, ModelKind::Refiner)?;
    let refiner = load_refiner(&ck)?;
    let target_mask = SegMask::read_png(&a.target_mask)?;
    let reference = GrayImage::read_png(&a.reference)?;
    let reference_mask = SegMask::read_png(&a.reference_mask)?;
    let (residual, refined) = refiner.refine(&target_mask, &reference_mask, &reference)?;
    refined.write_png(&a.out)?;
    if let Some(p) = &a.residual_out {
        GrayImage::new(reference.height(), reference.width(), residual)?.write_png(p)?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn png_names(dir: &Path) -> anyhow::Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    Ok(names)
}

/// Per-image challenge metric of `pred_dir` against `target_dir`, matched by
/// file name, and their mean.
pub fn evaluate_dirs(pred_dir: &Path, target_dir: &Path) -> anyhow::Result<(BTreeMap<String, f64>, f64)> {
    let pred = png_names(pred_dir)?;
    let target = png_names(target_dir)?;
    let missing: Vec<String> = pred
        .iter()
        .filter(|n| !target.contains(n))
        .map(|n| format!("{n} (no target)"))
        .chain(target.iter().filter(|n| !pred.contains(n)).map(|n| format!("{n} (no prediction)")))
        .collect();
    if !missing.is_empty() {
        bail!("unmatched files: {}", missing.join(", "));
    }
    if pred.is_empty() {
        bail!("no PNG files in {}", pred_dir.display());
    }
    let mut scores = BTreeMap::new();
    for name in pred {
        let p = GrayImage::read_png(&pred_dir.join(&name))?;
        let t = GrayImage::read_png(&target_dir.join(&name))?;
        scores.insert(name, challenge_metric(&p, &t)?);
    }
    let mean = scores.values().sum::<f64>() / scores.len() as f64;
    Ok((scores, mean))
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let (scores, mean) = evaluate_dirs(&a.pred_dir, &a.target_dir)?;
    println!("{}", json!({ "per_image": scores, "mean": mean }));
    println!("mean challenge_metric: {mean}");
    Ok(())
}

/// Row-major grid with `cols` columns; empty cells are black.
pub fn image_grid(images: &[GrayImage], cols: usize) -> crate::Result<GrayImage> {
    let first = images.first().ok_or(crate::Error::Empty("image grid"))?;
    let (h, w) = (first.height(), first.width());
    if images.iter().any(|i| i.height() != h || i.width() != w) {
        return Err(crate::Error::Shape("grid images must share one resolution".into()));
    }
    let cols = cols.min(images.len()).max(1);
    let rows = images.len().div_ceil(cols);
    let mut data = vec![-1.0f32; rows * h * cols * w];
    for (n, img) in images.iter().enumerate() {
        let (r, c) = (n / cols, n % cols);
        for y in 0..h {
            let row = (r * h + y) * cols * w + c * w;
            data[row..row + w].copy_from_slice(&img.data()[y * w..(y + 1) * w]);
        }
    }
    GrayImage::new(rows * h, cols * w, data)
}
