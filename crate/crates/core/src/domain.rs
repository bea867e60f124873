//! Shared domain types: segmentation masks, grayscale images, style codes,
//! and seeding helpers.

use std::path::Path;

use image::{GrayImage as PngGray, ImageBuffer, Luma};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "sclera", "iris", "pupil"];

pub const BACKGROUND: u8 = 0;
pub const SCLERA: u8 = 1;
pub const IRIS: u8 = 2;
pub const PUPIL: u8 = 3;

/// Integer class map, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("mask data has {} values, expected {height}x{width}", data.len())));
        }
        if let Some(&v) = data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::ClassOutOfRange { value: v, num_classes: NUM_CLASSES });
        }
        Ok(SegMask { height, width, data })
    }

    /// Build without range validation; for callers that construct from
    /// values already known to be classes.
    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        SegMask { height, width, data }
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Result<Self> {
        Self::new(height, width, vec![class; height * width])
    }

    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::Shape("ragged mask rows".into()));
        }
        Self::new(h, w, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Nearest-neighbour downsampling that keeps the top-left pixel of each
    /// `factor x factor` cell.
    pub fn downsample(&self, factor: usize) -> Result<SegMask> {
        if factor == 0 {
            return Err(Error::Invalid("downsample factor must be >= 1".into()));
        }
        if !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::Shape(format!(
                "{}x{} mask is not divisible by factor {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| self.get(y * factor, x * factor))
            .collect();
        Ok(SegMask::from_raw(h, w, data))
    }

    /// One-hot encoding as a `[1, num_classes, H, W]` tensor.
    pub fn one_hot<T: Scalar>(&self, num_classes: usize) -> Result<Tensor<T>> {
        if let Some(&v) = self.data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::ClassOutOfRange { value: v, num_classes });
        }
        let plane = self.height * self.width;
        let mut t = Tensor::zeros(&[1, num_classes, self.height, self.width]);
        for (p, &c) in self.data.iter().enumerate() {
            t.data_mut()[c as usize * plane + p] = T::one();
        }
        Ok(t)
    }

    /// Per-pixel argmax over the channel axis of a `[C, H, W]` slice (or the
    /// first sample of an NCHW tensor). Ties resolve to the lowest class.
    pub fn from_logits<T: Scalar>(logits: &[T], channels: usize, height: usize, width: usize) -> SegMask {
        let plane = height * width;
        let data = (0..plane)
            .map(|p| {
                let mut best = 0;
                for c in 1..channels {
                    if logits[c * plane + p] > logits[best * plane + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        SegMask::from_raw(height, width, data)
    }

    pub fn mirrored(&self) -> SegMask {
        let data = (0..self.height)
            .flat_map(|y| (0..self.width).rev().map(move |x| (y, x)))
            .map(|(y, x)| self.get(y, x))
            .collect();
        SegMask::from_raw(self.height, self.width, data)
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }

    pub fn read_png(path: &Path) -> Result<SegMask> {
        let img = read_gray_png(path)?;
        let (w, h) = img.dimensions();
        SegMask::new(h as usize, w as usize, img.into_raw())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        write_gray_png(path, self.width, self.height, self.data.clone())
    }
}

/// One-hot encode a batch of equally sized masks: `[N, num_classes, H, W]`.
pub fn one_hot_batch<T: Scalar>(masks: &[&SegMask], num_classes: usize) -> Result<Tensor<T>> {
    let parts = masks.iter().map(|m| m.one_hot::<T>(num_classes)).collect::<Result<Vec<_>>>()?;
    let (h, w) = (masks[0].height, masks[0].width);
    if masks.iter().any(|m| m.height != h || m.width != w) {
        return Err(Error::Shape("masks in a batch must share one resolution".into()));
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Ok(Tensor::concat_batch(&refs))
}

/// Map an 8-bit intensity to the internal `[-1, 1]` range.
pub fn to_internal(v: u8) -> f32 {
    2.0 * v as f32 / 255.0 - 1.0
}

/// Map an internal intensity to 8 bits, clamping and rounding half up.
pub fn to_disk(v: f32) -> u8 {
    let v = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
    ((v as f64 + 1.0) * 0.5 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Single-channel image in internal units `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayImage {
    /// Values are clamped to `[-1, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("image data has {} values, expected {height}x{width}", data.len())));
        }
        Ok(GrayImage { height, width, data: data.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect() })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        GrayImage { height, width, data: vec![value.clamp(-1.0, 1.0); height * width] }
    }

    pub fn from_u8(height: usize, width: usize, pixels: &[u8]) -> Result<Self> {
        Self::new(height, width, pixels.iter().map(|&p| to_internal(p)).collect())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_disk(v)).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(&[1, 1, self.height, self.width], self.data.iter().map(|&v| T::of(v as f64)).collect())
    }

    /// From one sample of a single-channel tensor, clamping to `[-1, 1]`.
    pub fn from_tensor_sample<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4();
        if c != 1 {
            return Err(Error::Shape(format!("expected 1 channel, got {c}")));
        }
        Self::new(h, w, t.sample(n).iter().map(|v| v.as_f64() as f32).collect())
    }

    pub fn mirrored(&self) -> GrayImage {
        let data = (0..self.height)
            .flat_map(|y| (0..self.width).rev().map(move |x| (y, x)))
            .map(|(y, x)| self.get(y, x))
            .collect();
        GrayImage { height: self.height, width: self.width, data }
    }

    pub fn read_png(path: &Path) -> Result<GrayImage> {
        let img = read_gray_png(path)?;
        let (w, h) = img.dimensions();
        GrayImage::from_u8(h as usize, w as usize, img.as_raw())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        write_gray_png(path, self.width, self.height, self.to_u8())
    }
}

/// Stack images into a `[N, 1, H, W]` tensor.
pub fn image_batch<T: Scalar>(images: &[&GrayImage]) -> Result<Tensor<T>> {
    let (h, w) = (images[0].height, images[0].width);
    if images.iter().any(|i| i.height != h || i.width != w) {
        return Err(Error::Shape("images in a batch must share one resolution".into()));
    }
    let parts: Vec<Tensor<T>> = images.iter().map(|i| i.to_tensor()).collect();
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Ok(Tensor::concat_batch(&refs))
}

pub(crate) fn read_gray_png(path: &Path) -> Result<PngGray> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(img.into_luma8())
}

pub(crate) fn write_gray_png(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| Error::Shape(format!("pixel buffer does not match {width}x{height}")))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Fixed-length appearance embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleCode(pub Vec<f32>);

impl StyleCode {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn distance(&self, other: &StyleCode) -> f32 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt()
    }

    /// `(1 - alpha) * self + alpha * other`.
    pub fn lerp(&self, other: &StyleCode, alpha: f32) -> StyleCode {
        StyleCode(self.0.iter().zip(&other.0).map(|(&a, &b)| (1.0 - alpha) * a + alpha * b).collect())
    }
}

/// 64-bit seed from which every random decision is derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Child seed for a labelled sub-stream, e.g. `seed.derive(&[person, image])`.
    pub fn derive(self, path: &[u64]) -> RngSeed {
        let mut h = splitmix64(self.0 ^ 0x005E_ED0F_E7E5);
        for &p in path {
            h = splitmix64(h ^ splitmix64(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
        }
        RngSeed(h)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
