//! The parameterized networks: style encoder, generator, multi-scale
//! discriminator, and the U-shaped segmenter/refiner pair.

mod discriminator;
mod encoder;
mod generator;
mod unet;

use serde::{Deserialize, Serialize};

use crate::domain::{StyleCode, NUM_CLASSES};
use crate::error::{Error, Result};

pub use discriminator::{Discriminator, ScaleOutput};
pub use encoder::StyleEncoder;
pub use generator::Generator;
pub use unet::{Refiner, Segmenter, UNet};

/// Architecture hyper-parameters. Every width is configurable; the defaults
/// are sized for CPU training at 64x64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub resolution: usize,
    pub num_classes: usize,
    pub style_dim: usize,
    /// Number of generator ResBlocks, each followed by 2x upsampling.
    pub upsample_stages: usize,
    /// Output width of each generator ResBlock; the seed tensor uses the first.
    pub generator_widths: Vec<usize>,
    pub spade_hidden: usize,
    pub encoder_widths: Vec<usize>,
    pub discriminator_widths: Vec<usize>,
    pub discriminator_scales: usize,
    pub segmenter_widths: Vec<usize>,
    pub refiner_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            resolution: 64,
            num_classes: NUM_CLASSES,
            style_dim: 64,
            upsample_stages: 4,
            generator_widths: vec![256, 128, 64, 32],
            spade_hidden: 32,
            encoder_widths: vec![16, 32, 64, 128],
            discriminator_widths: vec![32, 64, 128, 128],
            discriminator_scales: 2,
            segmenter_widths: vec![8, 16, 32, 64],
            refiner_widths: vec![16, 32, 64, 128],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.upsample_stages == 0 || self.generator_widths.len() != self.upsample_stages {
            return bad(format!(
                "generator_widths must list one width per upsampling stage ({} given, {} stages)",
                self.generator_widths.len(),
                self.upsample_stages
            ));
        }
        let factor = 1usize << self.upsample_stages;
        if self.resolution < 8 || !self.resolution.is_multiple_of(factor) {
            return bad(format!("resolution {} must be >= 8 and divisible by {factor}", self.resolution));
        }
        if !self.resolution.is_multiple_of(8) {
            return bad("resolution must be divisible by 8 for the U-shaped networks".into());
        }
        if self.encoder_widths.is_empty() || self.resolution >> self.encoder_widths.len() == 0 {
            return bad("encoder needs at least one stage and must not shrink below 1x1".into());
        }
        if self.discriminator_widths.len() < 2 || self.discriminator_scales == 0 {
            return bad("discriminator needs at least 2 layers (feature matching starts at layer 2) and 1 scale".into());
        }
        for (name, w) in [("segmenter_widths", &self.segmenter_widths), ("refiner_widths", &self.refiner_widths)] {
            if w.len() != 4 {
                return bad(format!("{name} must have 4 entries (3 down stages + bottleneck)"));
            }
        }
        if self.style_dim == 0 || self.num_classes == 0 || self.spade_hidden == 0 {
            return bad("style_dim, num_classes and spade_hidden must be positive".into());
        }
        Ok(())
    }
}

/// Element-wise maximum over a set of style codes.
pub fn aggregate_styles(codes: &[StyleCode]) -> Result<StyleCode> {
    let first = codes.first().ok_or(Error::Empty("aggregate_styles needs at least one code"))?;
    let d = first.len();
    if codes.iter().any(|c| c.len() != d) {
        return Err(Error::Shape("style codes differ in length".into()));
    }
    let mut out = first.0.clone();
    for c in &codes[1..] {
        for (o, &v) in out.iter_mut().zip(&c.0) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(StyleCode(out))
}
