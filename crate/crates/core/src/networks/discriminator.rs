use crate::autodiff::{Tape, Var};
use crate::blocks::{EPS, LEAKY_SLOPE};
use crate::domain::{GrayImage, RngSeed, SegMask};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ConvOpts, Init, ParamStore};
use crate::tensor::{Scalar, Tensor};

use super::ModelConfig;

const KERNEL: usize = 4;
const PAD: usize = 1;

#[derive(Clone, Debug)]
struct PatchDiscriminator {
    layers: Vec<Conv2d>,
    logits: Conv2d,
}

/// Logits and intermediate features of one discriminator scale.
pub struct ScaleOutput<'t, T: Scalar> {
    pub logits: Var<'t, T>,
    pub features: Vec<Var<'t, T>>,
}

/// Multi-scale patch discriminator over `concat(one-hot mask, image)`.
///
/// Each scale is a stack of 4x4 spectrally normalized convolutions (stride 2
/// except the last, which has stride 1), instance norm after all but the
/// first, leaky-ReLU after each, and a final 4x4 convolution to one logit
/// channel. Scale `i` sees the input average-pooled `i` times.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Scalar> {
    pub params: ParamStore<T>,
    scales: Vec<PatchDiscriminator>,
    num_classes: usize,
    resolution: usize,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(cfg: &ModelConfig, seed: RngSeed) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed.derive(&[0xD15C]).rng();
        let mut params = ParamStore::new();
        let n_layers = cfg.discriminator_widths.len();
        let scales = (0..cfg.discriminator_scales)
            .map(|s| {
                let mut c_in = cfg.num_classes + 1;
                let layers = cfg
                    .discriminator_widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let stride = if i + 1 == n_layers { 1 } else { 2 };
                        let conv = Conv2d::new(
                            &mut params,
                            &mut rng,
                            &format!("scale{s}.layer{i}"),
                            c_in,
                            w,
                            KERNEL,
                            ConvOpts::same3().stride(stride, PAD).spectral(),
                        );
                        c_in = w;
                        conv
                    })
                    .collect();
                let logits = Conv2d::new(
                    &mut params,
                    &mut rng,
                    &format!("scale{s}.logits"),
                    c_in,
                    1,
                    KERNEL,
                    ConvOpts::same3().stride(1, PAD).init(Init::LINEAR),
                );
                PatchDiscriminator { layers, logits }
            })
            .collect();
        Ok(Discriminator { params, scales, num_classes: cfg.num_classes, resolution: cfg.resolution })
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn layers_per_scale(&self) -> usize {
        self.scales[0].layers.len()
    }

    /// `masks: [N, C, H, W]` one-hot, `images: [N, 1, H, W]`.
    pub fn forward<'t>(
        &self,
        b: &Bound<'t, '_, T>,
        masks: &Tensor<T>,
        images: Var<'t, T>,
    ) -> Result<Vec<ScaleOutput<'t, T>>> {
        let ishape = images.shape();
        let (n, c, h, w) = masks.dims4();
        if c != self.num_classes || ishape != [n, 1, h, w] {
            return Err(Error::Shape(format!(
                "discriminator needs mask [N, {}, H, W] and image [N, 1, H, W] of equal size, got {:?} and {ishape:?}",
                self.num_classes,
                masks.shape()
            )));
        }
        if h != self.resolution || w != self.resolution {
            return Err(Error::Shape(format!("discriminator expects {r}x{r} inputs", r = self.resolution)));
        }
        let slope = T::of(LEAKY_SLOPE);
        let mut input = Var::concat_channels(&[b.tape().constant(masks.clone()), images]);
        let mut outs = Vec::with_capacity(self.scales.len());
        for (s, scale) in self.scales.iter().enumerate() {
            if s > 0 {
                input = input.avg_pool2();
            }
            let mut h = input;
            let mut features = Vec::with_capacity(scale.layers.len());
            for (i, conv) in scale.layers.iter().enumerate() {
                h = conv.forward(b, h);
                if i > 0 {
                    h = h.instance_norm(T::of(EPS));
                }
                h = h.leaky_relu(slope);
                features.push(h);
            }
            outs.push(ScaleOutput { logits: scale.logits.forward(b, h), features });
        }
        Ok(outs)
    }

    /// Evaluation-mode pass on one (mask, image) pair: per scale, the logit
    /// map and the intermediate features.
    #[allow(clippy::type_complexity)]
    pub fn discriminate(&self, mask: &SegMask, img: &GrayImage) -> Result<Vec<(Tensor<T>, Vec<Tensor<T>>)>> {
        if mask.height() != img.height() || mask.width() != img.width() {
            return Err(Error::Shape("mask and image resolution differ".into()));
        }
        let tape = Tape::new();
        let b = Bound::new(&tape, &self.params, false);
        let outs = self.forward(&b, &mask.one_hot(self.num_classes)?, tape.constant(img.to_tensor()))?;
        Ok(outs
            .into_iter()
            .map(|o| ((*o.logits.value()).clone(), o.features.iter().map(|f| (*f.value()).clone()).collect()))
            .collect())
    }
}
