use crate::autodiff::{Tape, Var};
use crate::blocks::{resize_mask, ResBlockDims, SpadeStyleResBlock, LEAKY_SLOPE};
use crate::domain::{GrayImage, RngSeed, SegMask, StyleCode};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ConvOpts, Init, Linear, ParamStore};
use crate::tensor::{Scalar, Tensor};

use super::ModelConfig;

/// Mask- and style-conditioned image generator.
///
/// A linear map turns the flattened one-hot mask at the seed resolution
/// (`resolution / 2^L`) into the initial feature tensor. Each of the `L`
/// SPADE+Style ResBlocks is followed by 2x nearest-neighbour upsampling; a
/// final `leaky-ReLU -> 3x3 conv -> tanh` produces the image.
#[derive(Clone, Debug)]
pub struct Generator<T: Scalar> {
    pub params: ParamStore<T>,
    seed_layer: Linear,
    blocks: Vec<SpadeStyleResBlock>,
    out_conv: Conv2d,
    cfg: ModelConfig,
    seed_res: usize,
}

impl<T: Scalar> Generator<T> {
    pub fn new(cfg: &ModelConfig, seed: RngSeed) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed.derive(&[0x6E4]).rng();
        let mut params = ParamStore::new();
        let seed_res = cfg.resolution >> cfg.upsample_stages;
        let w0 = cfg.generator_widths[0];
        let seed_layer = Linear::new(
            &mut params,
            &mut rng,
            "seed",
            cfg.num_classes * seed_res * seed_res,
            w0 * seed_res * seed_res,
            Init::LINEAR,
        );
        let mut c_in = w0;
        let blocks = cfg
            .generator_widths
            .iter()
            .enumerate()
            .map(|(i, &c_out)| {
                let d = ResBlockDims {
                    c_in,
                    c_out,
                    num_classes: cfg.num_classes,
                    hidden: cfg.spade_hidden,
                    style_dim: cfg.style_dim,
                };
                c_in = c_out;
                SpadeStyleResBlock::new(&mut params, &mut rng, &format!("block{i}"), d)
            })
            .collect();
        let out_conv = Conv2d::new(&mut params, &mut rng, "out", c_in, 1, 3, ConvOpts::same3().init(Init::LINEAR));
        Ok(Generator { params, seed_layer, blocks, out_conv, cfg: cfg.clone(), seed_res })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// `masks: [N, C, H, W]` one-hot, `style: [N, d_s]` -> `[N, 1, H, W]` in (-1, 1).
    pub fn forward<'t>(&self, b: &Bound<'t, '_, T>, masks: &Tensor<T>, style: Var<'t, T>) -> Result<Var<'t, T>> {
        let r = self.cfg.resolution;
        let (n, c, h, w) = masks.dims4();
        if c != self.cfg.num_classes || h != r || w != r {
            return Err(Error::Shape(format!(
                "generator expects masks [N, {}, {r}, {r}], got {:?}",
                self.cfg.num_classes,
                masks.shape()
            )));
        }
        let sshape = style.shape();
        if sshape != [n, self.cfg.style_dim] {
            return Err(Error::Shape(format!("style code must be [{n}, {}], got {sshape:?}", self.cfg.style_dim)));
        }
        let s = self.seed_res;
        let seed_in = resize_mask(masks, s, s)?.reshaped(&[n, c * s * s]);
        let mut x = self
            .seed_layer
            .forward(b, b.tape().constant(seed_in))
            .reshape(&[n, self.cfg.generator_widths[0], s, s]);
        for block in &self.blocks {
            x = block.forward(b, x, masks, style)?.upsample_nearest(2);
        }
        Ok(self.out_conv.forward(b, x.leaky_relu(T::of(LEAKY_SLOPE))).tanh())
    }

    /// Evaluation-mode generation of one image.
    pub fn generate(&self, mask: &SegMask, style: &StyleCode) -> Result<GrayImage> {
        if style.len() != self.cfg.style_dim {
            return Err(Error::Shape(format!("style code has length {}, expected {}", style.len(), self.cfg.style_dim)));
        }
        let tape = Tape::new();
        let b = Bound::new(&tape, &self.params, false);
        let masks = mask.one_hot::<T>(self.cfg.num_classes)?;
        let code = tape.constant(Tensor::new(
            &[1, style.len()],
            style.values().iter().map(|&v| T::of(v as f64)).collect(),
        ));
        let out = self.forward(&b, &masks, code)?;
        GrayImage::from_tensor_sample(&out.value(), 0)
    }
}
