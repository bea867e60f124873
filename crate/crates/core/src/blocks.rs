//! Normalization blocks that inject content (segmentation masks) and style
//! (latent codes) into generator feature maps.
//!
//! * [`AdaIn`]: instance norm followed by a per-channel scale and offset
//!   computed from a style code by a learned affine map.
//! * [`Spade`]: instance norm followed by a per-element scale and offset
//!   predicted from the mask by small convolutions.
//! * [`SpadeStyleBlock`]: the mean of the two branches applied to the same
//!   normalized input.
//! * [`SpadeStyleResBlock`]: two `block -> leaky-ReLU -> 3x3 conv` units plus a
//!   shortcut, which is learned (`block -> 1x1 conv`) when the channel count
//!   changes.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ConvOpts, Init, Linear, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

/// `(x - mean) / sqrt(var + eps)` per sample and channel.
pub fn instance_norm<'t, T: Scalar>(x: Var<'t, T>, eps: f64) -> Var<'t, T> {
    x.instance_norm(T::of(eps))
}

/// Nearest-neighbour (top-left) resize of a one-hot mask tensor to
/// `h x w`. The source size must be an integer multiple of the target.
pub fn resize_mask<T: Scalar>(mask: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, mh, mw) = mask.dims4();
    if (mh, mw) == (h, w) {
        return Ok(mask.clone());
    }
    if h == 0 || w == 0 || mh % h != 0 || mw % w != 0 || mh / h != mw / w {
        return Err(Error::Shape(format!("cannot resize {mh}x{mw} mask to {h}x{w} by an integer factor")));
    }
    let f = mh / h;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for (src, dst) in mask.data().chunks(mh * mw).zip(out.data_mut().chunks_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[y * f * mw + x * f];
            }
        }
    }
    Ok(out)
}

fn check_channels<T: Scalar>(x: &Var<'_, T>, channels: usize, what: &str) -> Result<()> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != channels {
        return Err(Error::Shape(format!("{what} expects [N, {channels}, H, W], got {shape:?}")));
    }
    Ok(())
}

/// Style-conditioned per-channel modulation.
#[derive(Clone, Debug)]
pub struct AdaIn {
    pub affine: Linear,
    pub channels: usize,
    pub style_dim: usize,
}

impl AdaIn {
    /// The affine map starts at `gamma = 1, beta = 0` (weights small, bias set).
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        style_dim: usize,
        channels: usize,
    ) -> Self {
        let affine = Linear::new(store, rng, &format!("{name}.affine"), style_dim, 2 * channels, Init::LINEAR);
        let bias = store.get_mut(affine.bias);
        bias.data_mut()[..channels].iter_mut().for_each(|v| *v = T::one());
        AdaIn { affine, channels, style_dim }
    }

    /// `(gamma, beta)`, each `[N, C]`: the first `C` affine outputs, then the last `C`.
    pub fn modulation<'t, T: Scalar>(&self, b: &Bound<'t, '_, T>, style: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let shape = style.shape();
        if shape.len() != 2 || shape[1] != self.style_dim {
            return Err(Error::Shape(format!("style code must be [N, {}], got {shape:?}", self.style_dim)));
        }
        let gb = self.affine.forward(b, style);
        Ok((gb.narrow_cols(0, self.channels), gb.narrow_cols(self.channels, self.channels)))
    }

    /// Modulate an already normalized input.
    pub fn modulate<'t, T: Scalar>(
        &self,
        b: &Bound<'t, '_, T>,
        normalized: Var<'t, T>,
        style: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        check_channels(&normalized, self.channels, "AdaIN")?;
        let (gamma, beta) = self.modulation(b, style)?;
        if gamma.shape()[0] != normalized.shape()[0] {
            return Err(Error::Shape("style batch size differs from feature batch size".into()));
        }
        Ok(normalized.channel_affine(gamma, beta))
    }

    pub fn forward<'t, T: Scalar>(&self, b: &Bound<'t, '_, T>, x: Var<'t, T>, style: Var<'t, T>) -> Result<Var<'t, T>> {
        self.modulate(b, instance_norm(x, EPS), style)
    }
}

/// Mask-conditioned per-element modulation.
#[derive(Clone, Debug)]
pub struct Spade {
    pub shared: Conv2d,
    pub gamma: Conv2d,
    pub beta: Conv2d,
    pub channels: usize,
    pub num_classes: usize,
}

impl Spade {
    /// The gamma convolution's bias starts at 1 so the block initially
    /// passes the normalized input through.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        num_classes: usize,
        hidden: usize,
        channels: usize,
    ) -> Self {
        let shared = Conv2d::new(store, rng, &format!("{name}.shared"), num_classes, hidden, 3, ConvOpts::same3());
        let gamma = Conv2d::new(store, rng, &format!("{name}.gamma"), hidden, channels, 3, ConvOpts::same3().init(Init::LINEAR));
        let beta = Conv2d::new(store, rng, &format!("{name}.beta"), hidden, channels, 3, ConvOpts::same3().init(Init::LINEAR));
        let gb = store.get_mut(gamma.bias.expect("gamma conv has a bias"));
        gb.data_mut().iter_mut().for_each(|v| *v = T::one());
        Spade { shared, gamma, beta, channels, num_classes }
    }

    /// `(gamma_map, beta_map)` at the given spatial size.
    pub fn modulation<'t, T: Scalar>(
        &self,
        b: &Bound<'t, '_, T>,
        mask_onehot: &Tensor<T>,
        h: usize,
        w: usize,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        if mask_onehot.shape().len() != 4 || mask_onehot.shape()[1] != self.num_classes {
            return Err(Error::Shape(format!(
                "SPADE mask must be [N, {}, H, W], got {:?}",
                self.num_classes,
                mask_onehot.shape()
            )));
        }
        let m = b.tape().constant(resize_mask(mask_onehot, h, w)?);
        let actv = self.shared.forward(b, m).relu();
        Ok((self.gamma.forward(b, actv), self.beta.forward(b, actv)))
    }

    pub fn modulate<'t, T: Scalar>(
        &self,
        b: &Bound<'t, '_, T>,
        normalized: Var<'t, T>,
        mask_onehot: &Tensor<T>,
    ) -> Result<Var<'t, T>> {
        check_channels(&normalized, self.channels, "SPADE")?;
        let shape = normalized.shape();
        if mask_onehot.shape()[0] != shape[0] {
            return Err(Error::Shape("mask batch size differs from feature batch size".into()));
        }
        let (gamma, beta) = self.modulation(b, mask_onehot, shape[2], shape[3])?;
        Ok(normalized * gamma + beta)
    }

    pub fn forward<'t, T: Scalar>(&self, b: &Bound<'t, '_, T>, x: Var<'t, T>, mask_onehot: &Tensor<T>) -> Result<Var<'t, T>> {
        self.modulate(b, instance_norm(x, EPS), mask_onehot)
    }
}

/// `(SPADE(x) + AdaIN(x)) / 2`.
#[derive(Clone, Debug)]
pub struct SpadeStyleBlock {
    pub spade: Spade,
    pub adain: AdaIn,
}

impl SpadeStyleBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        num_classes: usize,
        hidden: usize,
        style_dim: usize,
        channels: usize,
    ) -> Self {
        SpadeStyleBlock {
            spade: Spade::new(store, rng, &format!("{name}.spade"), num_classes, hidden, channels),
            adain: AdaIn::new(store, rng, &format!("{name}.adain"), style_dim, channels),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        b: &Bound<'t, '_, T>,
        x: Var<'t, T>,
        mask_onehot: &Tensor<T>,
        style: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let normalized = instance_norm(x, EPS);
        let s = self.spade.modulate(b, normalized, mask_onehot)?;
        let a = self.adain.modulate(b, normalized, style)?;
        Ok((s + a).scale(T::of(0.5)))
    }
}

#[derive(Clone, Debug)]
pub struct SpadeStyleResBlock {
    pub norm_0: SpadeStyleBlock,
    pub conv_0: Conv2d,
    pub norm_1: SpadeStyleBlock,
    pub conv_1: Conv2d,
    pub shortcut: Option<(SpadeStyleBlock, Conv2d)>,
    pub c_in: usize,
    pub c_out: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ResBlockDims {
    pub c_in: usize,
    pub c_out: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub style_dim: usize,
}

impl SpadeStyleResBlock {
    /// Main-path and shortcut convolutions are spectrally normalized.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, d: ResBlockDims) -> Self {
        let mid = d.c_in.min(d.c_out);
        let ssb = |store: &mut ParamStore<T>, rng: &mut _, n: &str, c| {
            SpadeStyleBlock::new(store, rng, &format!("{name}.{n}"), d.num_classes, d.hidden, d.style_dim, c)
        };
        let norm_0 = ssb(store, rng, "norm_0", d.c_in);
        let conv_0 = Conv2d::new(store, rng, &format!("{name}.conv_0"), d.c_in, mid, 3, ConvOpts::same3().spectral());
        let norm_1 = ssb(store, rng, "norm_1", mid);
        let conv_1 = Conv2d::new(store, rng, &format!("{name}.conv_1"), mid, d.c_out, 3, ConvOpts::same3().spectral());
        let shortcut = (d.c_in != d.c_out).then(|| {
            let n = ssb(store, rng, "norm_s", d.c_in);
            let c = Conv2d::new(
                store,
                rng,
                &format!("{name}.conv_s"),
                d.c_in,
                d.c_out,
                1,
                ConvOpts::same3().stride(1, 0).no_bias().spectral(),
            );
            (n, c)
        });
        SpadeStyleResBlock { norm_0, conv_0, norm_1, conv_1, shortcut, c_in: d.c_in, c_out: d.c_out }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        b: &Bound<'t, '_, T>,
        x: Var<'t, T>,
        mask_onehot: &Tensor<T>,
        style: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        check_channels(&x, self.c_in, "SPADE+Style ResBlock")?;
        let slope = T::of(LEAKY_SLOPE);
        let skip = match &self.shortcut {
            Some((norm, conv)) => conv.forward(b, norm.forward(b, x, mask_onehot, style)?),
            None => x,
        };
        let dx = self.conv_0.forward(b, self.norm_0.forward(b, x, mask_onehot, style)?.leaky_relu(slope));
        let dx = self.conv_1.forward(b, self.norm_1.forward(b, dx, mask_onehot, style)?.leaky_relu(slope));
        Ok(skip + dx)
    }
}
