use crate::autodiff::{Tape, Var};
use crate::blocks::{EPS, LEAKY_SLOPE};
use crate::domain::{image_batch, GrayImage, RngSeed, StyleCode};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ConvOpts, Init, Linear, ParamStore};
use crate::tensor::{Scalar, Tensor};

use super::ModelConfig;

/// Maps an image to a style code through stride-2 `conv -> instance norm ->
/// leaky-ReLU` stages, global average pooling and a linear head. Every stage
/// output is exposed for the Gram consistency loss.
#[derive(Clone, Debug)]
pub struct StyleEncoder<T: Scalar> {
    pub params: ParamStore<T>,
    stages: Vec<Conv2d>,
    head: Linear,
    resolution: usize,
    style_dim: usize,
}

impl<T: Scalar> StyleEncoder<T> {
    pub fn new(cfg: &ModelConfig, seed: RngSeed) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed.derive(&[0xE4C0]).rng();
        let mut params = ParamStore::new();
        let mut c_in = 1;
        let stages = cfg
            .encoder_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let conv = Conv2d::new(
                    &mut params,
                    &mut rng,
                    &format!("stage{i}"),
                    c_in,
                    w,
                    3,
                    ConvOpts::same3().stride(2, 1).spectral(),
                );
                c_in = w;
                conv
            })
            .collect();
        let head = Linear::new(&mut params, &mut rng, "head", c_in, cfg.style_dim, Init::LINEAR);
        Ok(StyleEncoder { params, stages, head, resolution: cfg.resolution, style_dim: cfg.style_dim })
    }

    pub fn style_dim(&self) -> usize {
        self.style_dim
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// `images: [N, 1, H, W]` -> (`[N, d_s]` codes, per-stage features).
    pub fn forward<'t>(&self, b: &Bound<'t, '_, T>, images: Var<'t, T>) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.resolution || shape[3] != self.resolution {
            return Err(Error::Shape(format!(
                "style encoder expects [N, 1, {r}, {r}], got {shape:?}",
                r = self.resolution
            )));
        }
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut h = images;
        for conv in &self.stages {
            h = conv.forward(b, h).instance_norm(T::of(EPS)).leaky_relu(T::of(LEAKY_SLOPE));
            feats.push(h);
        }
        let code = self.head.forward(b, h.global_avg_pool());
        Ok((code, feats))
    }

    /// Evaluation-mode encoding of one image.
    pub fn encode(&self, img: &GrayImage) -> Result<(StyleCode, Vec<Tensor<T>>)> {
        let tape = Tape::new();
        let b = Bound::new(&tape, &self.params, false);
        let (code, feats) = self.forward(&b, tape.constant(img.to_tensor()))?;
        let code = StyleCode(code.value().data().iter().map(|v| v.as_f64() as f32).collect());
        Ok((code, feats.iter().map(|f| (*f.value()).clone()).collect()))
    }

    pub fn encode_batch(&self, images: &[&GrayImage]) -> Result<Vec<StyleCode>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let b = Bound::new(&tape, &self.params, false);
        let (codes, _) = self.forward(&b, tape.constant(image_batch(images)?))?;
        let codes = codes.value();
        Ok(codes.data().chunks(self.style_dim).map(|c| StyleCode(c.iter().map(|v| v.as_f64() as f32).collect())).collect())
    }
}
