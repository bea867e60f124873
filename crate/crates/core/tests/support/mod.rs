//! Independent oracles, a finite-difference checker and the property suites
//! shared by the integration tests and the acceptance runner.

#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use seg2eye::autodiff::{Tape, Var};
use seg2eye::blocks::{instance_norm, AdaIn, ResBlockDims, Spade, SpadeStyleBlock, SpadeStyleResBlock, EPS};
use seg2eye::domain::one_hot_batch;
use seg2eye::losses::*;
use seg2eye::networks::{aggregate_styles, Generator, ModelConfig};
use seg2eye::nn::{Bound, ParamStore};
use seg2eye::ranking::{dataset_class_means, mask_mse, rank_dataset, PseudoLabeler};
use seg2eye::synthdata::{build_dataset, DatasetConfig, DatasetIndex};
use seg2eye::train::{train_segmenter, TrainConfig};
use seg2eye::{GrayImage, SegMask, StyleCode, Tensor};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize) -> SegMask {
    SegMask::new(h, w, (0..h * w).map(|_| rng.gen_range(0..4u8)).collect()).unwrap()
}

pub fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> GrayImage {
    GrayImage::from_u8(h, w, &(0..h * w).map(|_| rng.gen::<u8>()).collect::<Vec<_>>()).unwrap()
}

/// A concentric eye-like mask: background, sclera ring, iris, pupil.
pub fn disc_mask(h: usize, w: usize, cy: f64, cx: f64) -> SegMask {
    let data = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
            let r = (x * x + y * y).sqrt();
            let s = h as f64 / 16.0;
            if r < 2.0 * s {
                3
            } else if r < 4.0 * s {
                2
            } else if r < 6.5 * s {
                1
            } else {
                0
            }
        })
        .collect();
    SegMask::new(h, w, data).unwrap()
}

pub fn tiny_model(resolution: usize) -> ModelConfig {
    let stages = (resolution / 4).trailing_zeros() as usize;
    ModelConfig {
        resolution,
        style_dim: 6,
        upsample_stages: stages,
        generator_widths: (0..stages).map(|i| [8, 6, 4, 4][i]).collect(),
        spade_hidden: 4,
        encoder_widths: vec![4, 6],
        discriminator_widths: vec![4, 6],
        discriminator_scales: 1,
        segmenter_widths: vec![4, 4, 4, 4],
        refiner_widths: vec![4, 4, 4, 4],
        ..ModelConfig::default()
    }
}

/// Tiny 32x32 dataset of 3 persons under `root/data` and a training config
/// for it that checkpoints after every step.
pub fn tiny_pipeline(root: &Path, steps: u64) -> seg2eye::Result<TrainConfig> {
    let data = root.join("data");
    build_dataset(&DatasetConfig { out_dir: data.clone(), persons: 3, images_per_person: 8, resolution: 32, ..DatasetConfig::default() })?;
    Ok(TrainConfig {
        dataset_root: data,
        output_dir: root.join("out"),
        resolution: 32,
        batch_size: 2,
        k_style_images: 2,
        steps,
        checkpoint_every: 1,
        segmenter_checkpoint: Some(root.join("seg/segmenter.ckpt")),
        rankings: Some(root.join("rankings.json")),
        model: tiny_model(32),
        ..TrainConfig::default()
    })
}

/// Train the segmenter into `root/seg` and write `root/rankings.json`.
pub fn segment_and_rank(cfg: &TrainConfig, root: &Path) -> seg2eye::Result<()> {
    let seg = train_segmenter(&TrainConfig { output_dir: root.join("seg"), ..cfg.clone() }, None)?;
    let index = DatasetIndex::load(&cfg.dataset_root)?;
    let means = dataset_class_means(&index, &cfg.dataset_root)?;
    let labeler = PseudoLabeler::new(&seg.segmenter, &seg.checkpoint.content_hash(), &cfg.dataset_root, None);
    rank_dataset(&index, &cfg.dataset_root, &labeler, &means)?.save(&root.join("rankings.json"))
}

// ---------------------------------------------------------------------------
// Scalar oracles

pub fn oracle_challenge(a: &[u8], b: &[u8], h: usize, w: usize) -> f64 {
    let mut ss = 0.0;
    for i in 0..h {
        for j in 0..w {
            let d = a[i * w + j] as f64 - b[i * w + j] as f64;
            ss += d * d;
        }
    }
    ss.sqrt() / (h * w) as f64
}

pub fn oracle_mse(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s / a.len() as f64
}

/// Mean over rows of the Euclidean norm of the row difference.
pub fn oracle_style(s: &[f64], t: &[f64], n: usize, d: usize) -> f64 {
    let mut total = 0.0;
    for r in 0..n {
        let mut ss = 0.0;
        for c in 0..d {
            let x = s[r * d + c] - t[r * d + c];
            ss += x * x;
        }
        total += ss.sqrt();
    }
    total / n as f64
}

/// `[N, C, H, W]` -> `[N, C, C]` normalized by `C*H*W`.
pub fn oracle_gram(f: &Tensor<f64>) -> Vec<f64> {
    let (n, c, h, w) = f.dims4();
    let hw = h * w;
    let mut out = vec![0.0; n * c * c];
    for s in 0..n {
        for i in 0..c {
            for j in 0..c {
                let mut acc = 0.0;
                for k in 0..hw {
                    acc += f.data()[(s * c + i) * hw + k] * f.data()[(s * c + j) * hw + k];
                }
                out[(s * c + i) * c + j] = acc / (c * hw) as f64;
            }
        }
    }
    out
}

pub fn oracle_l1(a: &[f64], b: &[f64], reduction: Reduction) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    match reduction {
        Reduction::Mean => s / a.len() as f64,
        Reduction::Sum => s,
    }
}

pub fn oracle_gram_loss(fake: &[Tensor<f64>], real: &[Tensor<f64>], reduction: Reduction) -> f64 {
    let mut total = 0.0;
    for i in 1..fake.len() {
        total += oracle_l1(&oracle_gram(&fake[i]), &oracle_gram(&real[i]), reduction);
    }
    total
}

pub fn oracle_feature_matching(fake: &[Vec<Tensor<f64>>], real: &[Vec<Tensor<f64>>], reduction: Reduction) -> f64 {
    let mut total = 0.0;
    for s in 0..fake.len() {
        for i in 1..fake[s].len() {
            total += oracle_l1(fake[s][i].data(), real[s][i].data(), reduction);
        }
    }
    total
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

// ---------------------------------------------------------------------------
// Finite differences

pub const FD_STEP: f64 = 1e-5;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gradient norms below this are treated as zero when forming the relative
/// error (a bias followed by instance norm has an exactly zero gradient).
pub const GRAD_FLOOR: f64 = 1e-4;

/// `||analytic - numeric|| / max(||analytic||, ||numeric||, GRAD_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(GRAD_FLOOR)
}

/// Largest relative error over `inputs` of the tape gradient of `f` against
/// central differences.
pub fn input_gradient_error<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    input_gradient_error_for(inputs, inputs.len(), f)
}

/// Like [`input_gradient_error`] for the first `checked` inputs; the others
/// are constants of the objective and must receive no gradient (infinite
/// error otherwise).
pub fn input_gradient_error_for<F>(inputs: &[Tensor<f64>], checked: usize, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(Arc::new(t.clone()), true)).collect();
    let out = f(&tape, &vars);
    assert_eq!(out.value().numel(), 1, "objective must be a scalar");
    let grads = tape.backward(out);
    let eval = |xs: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };
    if vars[checked..].iter().any(|&v| grads.get(v).is_some_and(|g| g.max_abs() != 0.0)) {
        return f64::INFINITY;
    }
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate().take(checked) {
        let analytic = grads.get(vars[k]).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Largest relative error over trainable parameters of `store`, checking at
/// most `per_tensor` evenly spaced elements of each.
pub fn param_gradient_error<F>(store: &ParamStore<f64>, per_tensor: usize, f: F) -> f64
where
    F: for<'t, 's> Fn(&Bound<'t, 's, f64>) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let b = Bound::new(&tape, store, true);
    let out = f(&b);
    let mut grads = tape.backward(out);
    let grads = b.gradients(&mut grads);
    drop(b);
    let eval = |s: &ParamStore<f64>| {
        let tape = Tape::new();
        let b = Bound::new(&tape, s, false);
        f(&b).item()
    };
    let mut worst = 0.0f64;
    for (k, id) in store.ids().enumerate() {
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.get(id).numel();
        let stride = n.div_ceil(per_tensor).max(1);
        let picks: Vec<usize> = (0..n).step_by(stride).collect();
        let analytic: Vec<f64> = match &grads[k] {
            Some(g) => picks.iter().map(|&i| g.data()[i]).collect(),
            None => vec![0.0; picks.len()],
        };
        let mut numeric = Vec::with_capacity(picks.len());
        for &i in &picks {
            let mut s = store.clone();
            s.get_mut(id).data_mut()[i] += FD_STEP;
            let up = eval(&s);
            s.get_mut(id).data_mut()[i] -= 2.0 * FD_STEP;
            let down = eval(&s);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let e = relative_error(&analytic, &numeric);
        if std::env::var_os("FD_DEBUG").is_some() {
            eprintln!("{} {e:e} {:?} {:?}", store.name(id), &analytic[..analytic.len().min(3)], &numeric[..numeric.len().min(3)]);
        }
        worst = worst.max(e);
    }
    worst
}

/// Fixed projection so a tensor-valued block output becomes a scalar with a
/// non-uniform gradient.
pub fn probe<'t>(y: Var<'t, f64>) -> Var<'t, f64> {
    let shape = y.shape();
    let w = Tensor::from_fn(&shape, |i| ((i as f64) * 0.37).sin() + 0.5);
    (y * y.tape().constant(w)).sum()
}

// ---------------------------------------------------------------------------
// Criterion suites

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn onehot(masks: &[&SegMask]) -> Tensor<f64> {
    one_hot_batch(masks, 4).unwrap()
}

/// AdaIN moments, SPADE locality, SPADE+Style definitional equality and the
/// ResBlock residual identity.
pub fn block_math_suite() -> Check {
    let mut r = rng(101);

    // AdaIN: per-channel mean equals beta and std equals |gamma|.
    let mut worst_moment = 0.0f64;
    for trial in 0..20 {
        let mut store = ParamStore::<f64>::new();
        let (c, d) = (5, 7);
        let ada = AdaIn::new(&mut store, &mut r, "a", d, c);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = randn(&mut r, &shape, 0.8);
        }
        let tape = Tape::new();
        let b = Bound::new(&tape, &store, false);
        let x = tape.constant(randn(&mut r, &[2, c, 9, 9], 1.0 + trial as f64 * 0.3));
        let s = tape.constant(randn(&mut r, &[2, d], 1.0));
        let y = ada.forward(&b, x, s).map_err(|e| e.to_string())?.value();
        let (gamma, beta) = ada.modulation(&b, s).map_err(|e| e.to_string())?;
        let (gamma, beta) = (gamma.value(), beta.value());
        for n in 0..2 {
            for ch in 0..c {
                let plane = &y.data()[(n * c + ch) * 81..(n * c + ch + 1) * 81];
                let mean = plane.iter().sum::<f64>() / 81.0;
                let std = (plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 81.0).sqrt();
                let (g, bt) = (gamma.data()[n * c + ch], beta.data()[n * c + ch]);
                worst_moment = worst_moment.max((mean - bt).abs()).max((std - g.abs()).abs());
            }
        }
    }
    ensure(worst_moment < 1e-4, || format!("AdaIN moment error {worst_moment:e}"))?;

    // SPADE: flipping one mask pixel changes outputs only within the two-conv
    // receptive field (radius 2), bit-exactly elsewhere.
    let mut store = ParamStore::<f64>::new();
    let spade = Spade::new(&mut store, &mut r, "s", 4, 6, 3);
    let (h, w) = (16, 16);
    let mask = random_mask(&mut r, h, w);
    let xv = randn(&mut r, &[1, 3, h, w], 1.0);
    let mut outside_changed = 0;
    let mut inside_changed = 0;
    for &(py, px) in &[(8usize, 8usize), (0, 0), (15, 3), (4, 12)] {
        let mut data = mask.data().to_vec();
        data[py * w + px] = (data[py * w + px] + 1 + (py as u8 % 3)) % 4;
        let edited = SegMask::new(h, w, data).unwrap();
        let tape = Tape::new();
        let b = Bound::new(&tape, &store, false);
        let y0 = spade.forward(&b, tape.constant(xv.clone()), &onehot(&[&mask])).unwrap().value();
        let y1 = spade.forward(&b, tape.constant(xv.clone()), &onehot(&[&edited])).unwrap().value();
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let i = (ch * h + y) * w + x;
                    let same = y0.data()[i].to_bits() == y1.data()[i].to_bits();
                    let near = y.abs_diff(py) <= 2 && x.abs_diff(px) <= 2;
                    if !near && !same {
                        outside_changed += 1;
                    }
                    if near && !same {
                        inside_changed += 1;
                    }
                }
            }
        }
    }
    ensure(outside_changed == 0, || format!("SPADE changed {outside_changed} outputs outside the receptive field"))?;
    ensure(inside_changed > 0, || "SPADE output did not react to a mask edit".into())?;

    // SPADE+Style = (SPADE + AdaIN) / 2 through the public sub-blocks.
    let mut worst_def = 0.0f64;
    for _ in 0..10 {
        let mut store = ParamStore::<f64>::new();
        let blk = SpadeStyleBlock::new(&mut store, &mut r, "b", 4, 5, 6, 3);
        let tape = Tape::new();
        let b = Bound::new(&tape, &store, false);
        let x = tape.constant(randn(&mut r, &[2, 3, 8, 8], 1.5));
        let s = tape.constant(randn(&mut r, &[2, 6], 1.0));
        let (m0, m1) = (random_mask(&mut r, 8, 8), random_mask(&mut r, 8, 8));
        let m = onehot(&[&m0, &m1]);
        let y = blk.forward(&b, x, &m, s).unwrap().value();
        let sp = blk.spade.forward(&b, x, &m).unwrap().value();
        let ad = blk.adain.forward(&b, x, s).unwrap().value();
        for i in 0..y.numel() {
            worst_def = worst_def.max((y.data()[i] - (sp.data()[i] + ad.data()[i]) / 2.0).abs());
        }
    }
    ensure(worst_def < 1e-6, || format!("SPADE+Style definitional error {worst_def:e}"))?;

    // ResBlock with zeroed main path is the identity.
    let mut store = ParamStore::<f64>::new();
    let dims = ResBlockDims { c_in: 4, c_out: 4, num_classes: 4, hidden: 5, style_dim: 6 };
    let blk = SpadeStyleResBlock::new(&mut store, &mut r, "r", dims);
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        if (name.starts_with("r.conv_0") || name.starts_with("r.conv_1")) && store.is_trainable(id) {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let tape = Tape::new();
    let b = Bound::new(&tape, &store, false);
    let xv = randn(&mut r, &[2, 4, 6, 6], 1.0);
    let (m0, m1) = (random_mask(&mut r, 6, 6), random_mask(&mut r, 6, 6));
    let y = blk.forward(&b, tape.constant(xv.clone()), &onehot(&[&m0, &m1]), tape.constant(randn(&mut r, &[2, 6], 1.0)));
    ensure(*y.unwrap().value() == xv, || "ResBlock with zero main path is not the identity".into())?;

    Ok(format!(
        "adain moment err {worst_moment:.1e}, spade locality exact ({inside_changed} in-field changes), definitional err {worst_def:.1e}, residual identity exact"
    ))
}

/// Central-difference checks of every differentiable loss and block.
pub fn gradient_suite() -> Check {
    let mut r = rng(202);
    let mut results: Vec<(&str, f64, f64)> = Vec::new();
    let mut push = |name, err, tol| results.push((name, err, tol));

    let a = randn(&mut r, &[2, 1, 3, 3], 1.0);
    let b = randn(&mut r, &[2, 1, 3, 3], 1.0);
    push("instance_norm", input_gradient_error(&[randn(&mut r, &[2, 3, 4, 4], 1.0)], |_, v| probe(instance_norm(v[0], EPS))), 1e-4);
    push("l2_pixel_loss", input_gradient_error(&[a.clone(), b.clone()], |_, v| l2_pixel_loss(v[0], v[1]).unwrap()), 1e-4);
    push("refiner_loss", input_gradient_error(&[a.clone(), b.clone()], |_, v| refiner_loss(v[0], v[1]).unwrap()), 1e-4);
    push(
        "style_code_loss",
        input_gradient_error_for(&[randn(&mut r, &[3, 5], 1.0), randn(&mut r, &[3, 5], 1.0)], 1, |_, v| {
            style_code_loss(v[1], v[0]).unwrap()
        }),
        1e-4,
    );
    push("gram_matrix", input_gradient_error(&[randn(&mut r, &[2, 3, 3, 3], 1.0)], |_, v| probe(gram_matrix(v[0]))), 1e-4);
    let feats: Vec<Tensor<f64>> = [[2, 2, 4, 4], [2, 3, 2, 2], [2, 4, 2, 2]].iter().map(|s| randn(&mut r, s, 1.0)).collect();
    let reals: Vec<Tensor<f64>> = feats.iter().map(|f| randn(&mut r, f.shape(), 1.0)).collect();
    let all: Vec<Tensor<f64>> = feats.iter().chain(&reals).cloned().collect();
    for red in [Reduction::Mean, Reduction::Sum] {
        push(
            "gram_loss",
            input_gradient_error_for(&all, 3, |_, v| gram_loss(&v[..3], &v[3..], red).unwrap()),
            1e-4,
        );
        push(
            "feature_matching_loss",
            input_gradient_error_for(&all, 3, |_, v| {
                feature_matching_loss(&[v[..3].to_vec()], &[v[3..].to_vec()], red).unwrap()
            }),
            1e-4,
        );
    }
    let logits: Vec<Tensor<f64>> = (0..4).map(|_| randn(&mut r, &[2, 1, 3, 3], 1.3)).collect();
    push("gan_loss_d", input_gradient_error(&logits, |_, v| gan_loss_d(&v[..2], &v[2..]).unwrap()), 1e-4);
    push("gan_loss_g", input_gradient_error(&logits[..2], |_, v| gan_loss_g(v).unwrap()), 1e-4);
    let masks = [random_mask(&mut r, 3, 3), random_mask(&mut r, 3, 3)];
    push(
        "segmenter_loss",
        input_gradient_error(&[randn(&mut r, &[2, 4, 3, 3], 1.0)], |_, v| segmenter_loss(v[0], &[&masks[0], &masks[1]]).unwrap()),
        1e-4,
    );
    let terms: Vec<Tensor<f64>> = (0..5).map(|_| Tensor::scalar(r.gen_range(0.1..1.0))).collect();
    push(
        "generator_objective",
        input_gradient_error(&terms, |_, v| {
            let t = LossTerms { gan: Some(v[0]), feature_matching: Some(v[1]), l2: Some(v[2]), style: Some(v[3]), gram: Some(v[4]) };
            generator_objective_var(&t, &LossWeights::default()).unwrap().0
        }),
        1e-4,
    );

    // Blocks, with respect to inputs and parameters.
    let mask_a = random_mask(&mut r, 6, 6);
    let m = onehot(&[&mask_a]);
    let mut store = ParamStore::<f64>::new();
    let ada = AdaIn::new(&mut store, &mut r, "a", 5, 4);
    let x = randn(&mut r, &[1, 4, 6, 6], 1.0);
    let s = randn(&mut r, &[1, 5], 1.0);
    push(
        "adain (inputs)",
        input_gradient_error(&[x.clone(), s.clone()], |t, v| probe(ada.forward(&Bound::new(t, &store, false), v[0], v[1]).unwrap())),
        1e-4,
    );
    push(
        "adain (params)",
        param_gradient_error(&store, 40, |b| probe(ada.forward(b, b.tape().constant(x.clone()), b.tape().constant(s.clone())).unwrap())),
        1e-4,
    );
    let mut store = ParamStore::<f64>::new();
    let spade = Spade::new(&mut store, &mut r, "s", 4, 3, 4);
    push(
        "spade (inputs)",
        input_gradient_error(std::slice::from_ref(&x), |t, v| probe(spade.forward(&Bound::new(t, &store, false), v[0], &m).unwrap())),
        1e-4,
    );
    push(
        "spade (params)",
        param_gradient_error(&store, 40, |b| probe(spade.forward(b, b.tape().constant(x.clone()), &m).unwrap())),
        1e-4,
    );
    let mut store = ParamStore::<f64>::new();
    let ssb = SpadeStyleBlock::new(&mut store, &mut r, "b", 4, 3, 5, 4);
    push(
        "spade+style block (inputs)",
        input_gradient_error(&[x.clone(), s.clone()], |t, v| probe(ssb.forward(&Bound::new(t, &store, false), v[0], &m, v[1]).unwrap())),
        1e-4,
    );
    push(
        "spade+style block (params)",
        param_gradient_error(&store, 30, |b| {
            probe(ssb.forward(b, b.tape().constant(x.clone()), &m, b.tape().constant(s.clone())).unwrap())
        }),
        1e-4,
    );
    for (c_in, c_out) in [(4, 4), (4, 3)] {
        let mut store = ParamStore::<f64>::new();
        let dims = ResBlockDims { c_in, c_out, num_classes: 4, hidden: 3, style_dim: 5 };
        let blk = SpadeStyleResBlock::new(&mut store, &mut r, "r", dims);
        push(
            "spade+style resblock (inputs)",
            input_gradient_error(&[x.clone(), s.clone()], |t, v| blk.forward(&Bound::new(t, &store, false), v[0], &m, v[1]).unwrap().sum()),
            1e-4,
        );
        push(
            "spade+style resblock (params)",
            param_gradient_error(&store, 20, |b| {
                probe(blk.forward(b, b.tape().constant(x.clone()), &m, b.tape().constant(s.clone())).unwrap())
            }),
            1e-4,
        );
    }

    // Whole generator: d(sum of output) / d(style code) on a 16x16 model.
    let cfg = tiny_model(16);
    let g = Generator::<f64>::new(&cfg, seg2eye::RngSeed(5)).map_err(|e| e.to_string())?;
    let gm = onehot(&[&disc_mask(16, 16, 7.5, 8.5)]);
    let code = randn(&mut r, &[1, cfg.style_dim], 1.0);
    push(
        "generate path (style code)",
        input_gradient_error(&[code], |t, v| g.forward(&Bound::new(t, &g.params, false), &gm, v[0]).unwrap().sum()),
        1e-3,
    );

    let failed: Vec<String> =
        results.iter().filter(|(_, e, tol)| e.is_nan() || e >= tol).map(|(n, e, tol)| format!("{n}: {e:e} >= {tol:e}")).collect();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    if failed.is_empty() {
        Ok(format!("{} checks, worst relative error {worst:.1e}", results.len()))
    } else {
        Err(failed.join("; "))
    }
}

/// Every metric and loss against its scalar oracle on 20 random instances,
/// plus the layer-1 exclusion of the feature matching and Gram sums.
pub fn oracle_suite() -> Check {
    let mut r = rng(303);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (r.gen_range(1..7), r.gen_range(1..7));
        let (a, b) = (random_image(&mut r, h, w), random_image(&mut r, h, w));
        let got = challenge_metric(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max(rel(got, oracle_challenge(&a.to_u8(), &b.to_u8(), h, w)));

        let a64: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
        let b64: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
        worst = worst.max(rel(mask_mse(&a, &b).map_err(|e| e.to_string())?, oracle_mse(&a64, &b64)));

        let n = r.gen_range(1..4);
        let shape = [n, 1, h, w];
        let (fa, fb) = (randn(&mut r, &shape, 1.0), randn(&mut r, &shape, 1.0));
        let tape = Tape::new();
        let got = l2_pixel_loss(tape.constant(fa.clone()), tape.constant(fb.clone())).unwrap().item();
        worst = worst.max(rel(got, oracle_mse(fa.data(), fb.data())));

        let d = r.gen_range(1..9);
        let (s, t) = (randn(&mut r, &[n, d], 1.0), randn(&mut r, &[n, d], 1.0));
        let got = style_code_loss(tape.constant(s.clone()), tape.constant(t.clone())).unwrap().item();
        worst = worst.max(rel(got, oracle_style(s.data(), t.data(), n, d)));

        let c = r.gen_range(1..5);
        let f = randn(&mut r, &[n, c, h, w], 1.0);
        let got = gram_matrix(tape.constant(f.clone())).value();
        for (x, y) in got.data().iter().zip(oracle_gram(&f)) {
            worst = worst.max(rel(*x, y));
        }

        let m = r.gen_range(2..5);
        let shapes: Vec<[usize; 4]> = (0..m).map(|_| [n, r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4)]).collect();
        let red = if r.gen_bool(0.5) { Reduction::Mean } else { Reduction::Sum };
        let fake: Vec<Tensor<f64>> = shapes.iter().map(|s| randn(&mut r, s, 1.0)).collect();
        let real: Vec<Tensor<f64>> = shapes.iter().map(|s| randn(&mut r, s, 1.0)).collect();
        let vf: Vec<_> = fake.iter().map(|t| tape.constant(t.clone())).collect();
        let vr: Vec<_> = real.iter().map(|t| tape.constant(t.clone())).collect();
        worst = worst.max(rel(gram_loss(&vf, &vr, red).unwrap().item(), oracle_gram_loss(&fake, &real, red)));
        let scales = r.gen_range(1..3);
        let ff: Vec<Vec<Tensor<f64>>> = (0..scales).map(|_| shapes.iter().map(|s| randn(&mut r, s, 1.0)).collect()).collect();
        let rr: Vec<Vec<Tensor<f64>>> = (0..scales).map(|_| shapes.iter().map(|s| randn(&mut r, s, 1.0)).collect()).collect();
        let vff: Vec<Vec<_>> = ff.iter().map(|l| l.iter().map(|t| tape.constant(t.clone())).collect()).collect();
        let vrr: Vec<Vec<_>> = rr.iter().map(|l| l.iter().map(|t| tape.constant(t.clone())).collect()).collect();
        let got = feature_matching_loss(&vff, &vrr, red).unwrap().item();
        worst = worst.max(rel(got, oracle_feature_matching(&ff, &rr, red)));

        // Perturbing only the first layer leaves both sums bit-identical.
        let mut bumped = fake.clone();
        bumped[0] = randn(&mut r, &shapes[0], 5.0);
        let vb: Vec<_> = bumped.iter().map(|t| tape.constant(t.clone())).collect();
        let g0 = gram_loss(&vf, &vr, red).unwrap().item();
        let g1 = gram_loss(&vb, &vr, red).unwrap().item();
        ensure(g0.to_bits() == g1.to_bits(), || "gram_loss depends on the first stage".into())?;
        let f0 = feature_matching_loss(std::slice::from_ref(&vf), std::slice::from_ref(&vr), red).unwrap().item();
        let f1 = feature_matching_loss(&[vb], std::slice::from_ref(&vr), red).unwrap().item();
        ensure(f0.to_bits() == f1.to_bits(), || "feature_matching_loss depends on the first layer".into())?;
    }
    ensure(worst < 1e-7, || format!("worst oracle disagreement {worst:e}"))?;
    Ok(format!("20 instances, worst relative disagreement {worst:.1e}; first-layer exclusion bit-exact"))
}

/// Element-wise max aggregation: permutation invariance, idempotence,
/// monotonicity and the k = 1 identity on 100 random code sets.
pub fn aggregation_suite() -> Check {
    let mut r = rng(404);
    for trial in 0..100 {
        let k = r.gen_range(1..7);
        let d = r.gen_range(1..17);
        let codes: Vec<StyleCode> =
            (0..k).map(|_| StyleCode((0..d).map(|_| Distribution::<f32>::sample(&StandardNormal, &mut r)).collect())).collect();
        let agg = aggregate_styles(&codes).map_err(|e| e.to_string())?;

        // Every permutation (k <= 6) gives the same bits.
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            let perm: Vec<StyleCode> = idx.iter().map(|&i| codes[i].clone()).collect();
            let p = aggregate_styles(&perm).unwrap();
            ensure(p.0.iter().zip(&agg.0).all(|(a, b)| a.to_bits() == b.to_bits()), || {
                format!("trial {trial}: permutation {idx:?} changed the result")
            })?;
            if !next_permutation(&mut idx) {
                break;
            }
        }
        let doubled: Vec<StyleCode> = codes.iter().chain(&codes).cloned().collect();
        ensure(aggregate_styles(&doubled).unwrap() == agg, || format!("trial {trial}: not idempotent"))?;
        ensure(aggregate_styles(&[agg.clone(), agg.clone()]).unwrap() == agg, || format!("trial {trial}: agg(c, c) != c"))?;
        ensure(aggregate_styles(&codes[..1]).unwrap() == codes[0], || format!("trial {trial}: k = 1 is not the identity"))?;

        let (j, e) = (r.gen_range(0..k), r.gen_range(0..d));
        let mut raised = codes.clone();
        raised[j].0[e] += r.gen_range(0.0..2.0f32);
        let up = aggregate_styles(&raised).unwrap();
        ensure(up.0.iter().zip(&agg.0).all(|(a, b)| a >= b), || format!("trial {trial}: not monotone"))?;
        for i in 0..d {
            let m = codes.iter().map(|c| c.0[i]).fold(f32::NEG_INFINITY, f32::max);
            ensure(agg.0[i] == m, || format!("trial {trial}: element {i} is not the maximum"))?;
        }
    }
    Ok("100 code sets: permutation invariant, idempotent, monotone, k = 1 identity".into())
}

fn next_permutation(v: &mut [usize]) -> bool {
    let n = v.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}
