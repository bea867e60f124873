use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::blocks::LEAKY_SLOPE;
use crate::domain::{image_batch, one_hot_batch, GrayImage, RngSeed, SegMask};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ConvOpts, Init, ParamStore};
use crate::tensor::{Scalar, Tensor};

use super::ModelConfig;

/// Compact encoder-decoder: three `double conv -> 2x2 average pool` stages,
/// a bottleneck, and three `upsample -> concat skip -> double conv` stages,
/// followed by a 1x1 head.
#[derive(Clone, Debug)]
pub struct UNet {
    down: Vec<(Conv2d, Conv2d)>,
    up: Vec<(Conv2d, Conv2d)>,
    head: Conv2d,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl UNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        widths: &[usize],
        in_channels: usize,
        out_channels: usize,
        zero_head: bool,
    ) -> Self {
        assert_eq!(widths.len(), 4);
        let double = |store: &mut ParamStore<T>, rng: &mut _, name: String, c_in, c_out| {
            (
                Conv2d::new(store, rng, &format!("{name}.a"), c_in, c_out, 3, ConvOpts::same3()),
                Conv2d::new(store, rng, &format!("{name}.b"), c_out, c_out, 3, ConvOpts::same3()),
            )
        };
        let mut c_in = in_channels;
        let down = (0..4)
            .map(|l| {
                let blk = double(store, rng, format!("down{l}"), c_in, widths[l]);
                c_in = widths[l];
                blk
            })
            .collect();
        let up = (0..3)
            .map(|l| double(store, rng, format!("up{l}"), widths[l + 1] + widths[l], widths[l]))
            .collect();
        let head_init = if zero_head { Init::Zeros } else { Init::LINEAR };
        let head = Conv2d::new(store, rng, "head", widths[0], out_channels, 1, ConvOpts::same3().stride(1, 0).init(head_init));
        UNet { down, up, head, in_channels, out_channels }
    }

    pub fn forward<'t, T: Scalar>(&self, b: &Bound<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.in_channels || !shape[2].is_multiple_of(8) || !shape[3].is_multiple_of(8) {
            return Err(Error::Shape(format!(
                "U-Net expects [N, {}, H, W] with H, W divisible by 8, got {shape:?}",
                self.in_channels
            )));
        }
        let slope = T::of(LEAKY_SLOPE);
        let double = |(a, bb): &(Conv2d, Conv2d), h: Var<'t, T>| {
            bb.forward(b, a.forward(b, h).leaky_relu(slope)).leaky_relu(slope)
        };
        let mut skips = Vec::with_capacity(3);
        let mut h = x;
        for blk in &self.down[..3] {
            h = double(blk, h);
            skips.push(h);
            h = h.avg_pool2();
        }
        h = double(&self.down[3], h);
        for (l, blk) in self.up.iter().enumerate().rev() {
            h = Var::concat_channels(&[h.upsample_nearest(2), skips[l]]);
            h = double(blk, h);
        }
        Ok(self.head.forward(b, h))
    }
}

/// Pixel-wise classifier producing pseudo-labels for unlabeled images.
#[derive(Clone, Debug)]
pub struct Segmenter<T: Scalar> {
    pub params: ParamStore<T>,
    pub net: UNet,
    num_classes: usize,
}

impl<T: Scalar> Segmenter<T> {
    pub fn new(cfg: &ModelConfig, seed: RngSeed) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed.derive(&[0x5E6]).rng();
        let mut params = ParamStore::new();
        let net = UNet::new(&mut params, &mut rng, &cfg.segmenter_widths, 1, cfg.num_classes, false);
        Ok(Segmenter { params, net, num_classes: cfg.num_classes })
    }

    /// `[N, 1, H, W]` images -> `[N, num_classes, H, W]` logits.
    pub fn forward<'t>(&self, b: &Bound<'t, '_, T>, images: Var<'t, T>) -> Result<Var<'t, T>> {
        self.net.forward(b, images)
    }

    /// Class logits `[1, num_classes, H, W]` for one image.
    pub fn segment(&self, img: &GrayImage) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let b = Bound::new(&tape, &self.params, false);
        Ok((*self.forward(&b, tape.constant(img.to_tensor()))?.value()).clone())
    }

    /// Argmax pseudo-labels for a batch of images.
    pub fn predict(&self, images: &[&GrayImage]) -> Result<Vec<SegMask>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let b = Bound::new(&tape, &self.params, false);
        let logits = self.forward(&b, tape.constant(image_batch(images)?))?.value();
        let (n, c, h, w) = logits.dims4();
        Ok((0..n).map(|s| SegMask::from_logits(logits.sample(s), c, h, w)).collect())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// Predicts a residual that turns a reference image into one matching a
/// target mask: `refined = reference + residual`.
#[derive(Clone, Debug)]
pub struct Refiner<T: Scalar> {
    pub params: ParamStore<T>,
    pub net: UNet,
    num_classes: usize,
}

impl<T: Scalar> Refiner<T> {
    /// The output layer starts at zero, so an untrained refiner returns the
    /// reference unchanged.
    pub fn new(cfg: &ModelConfig, seed: RngSeed) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed.derive(&[0x2EF]).rng();
        let mut params = ParamStore::new();
        let net = UNet::new(&mut params, &mut rng, &cfg.refiner_widths, 2 * cfg.num_classes + 1, 1, true);
        Ok(Refiner { params, net, num_classes: cfg.num_classes })
    }

    /// Network input `concat(onehot(M_T), onehot(M_I), I)`.
    pub fn input(&self, target_masks: &[&SegMask], ref_masks: &[&SegMask], ref_images: &[&GrayImage]) -> Result<Tensor<T>> {
        if target_masks.len() != ref_masks.len() || target_masks.len() != ref_images.len() || target_masks.is_empty() {
            return Err(Error::Shape("refiner needs equally many target masks, reference masks and images".into()));
        }
        for ((t, r), i) in target_masks.iter().zip(ref_masks).zip(ref_images) {
            if (t.height(), t.width()) != (r.height(), r.width()) || (t.height(), t.width()) != (i.height(), i.width()) {
                return Err(Error::Shape("refiner inputs must share one resolution".into()));
            }
        }
        let mt = one_hot_batch::<T>(target_masks, self.num_classes)?;
        let mi = one_hot_batch::<T>(ref_masks, self.num_classes)?;
        let im = image_batch::<T>(ref_images)?;
        let (n, c, h, w) = mt.dims4();
        let plane = h * w;
        let total = 2 * c + 1;
        let mut data = Vec::with_capacity(n * total * plane);
        for s in 0..n {
            data.extend_from_slice(mt.sample(s));
            data.extend_from_slice(mi.sample(s));
            data.extend_from_slice(im.sample(s));
        }
        Ok(Tensor::new(&[n, total, h, w], data))
    }

    /// Residual map `[N, 1, H, W]` from a prepared input.
    pub fn forward<'t>(&self, b: &Bound<'t, '_, T>, input: Var<'t, T>) -> Result<Var<'t, T>> {
        self.net.forward(b, input)
    }

    /// Returns the residual map and `clamp(reference + residual, -1, 1)`.
    pub fn refine(&self, target_mask: &SegMask, ref_mask: &SegMask, ref_img: &GrayImage) -> Result<(Vec<f32>, GrayImage)> {
        let input = self.input(&[target_mask], &[ref_mask], &[ref_img])?;
        let tape = Tape::new();
        let b = Bound::new(&tape, &self.params, false);
        let residual = self.forward(&b, tape.constant(input))?.value();
        let residual: Vec<f32> = residual.data().iter().map(|v| v.as_f64() as f32).collect();
        let refined = ref_img.data().iter().zip(&residual).map(|(&i, &r)| i + r).collect();
        Ok((residual, GrayImage::new(ref_img.height(), ref_img.width(), refined)?))
    }
}
