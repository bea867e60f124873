//! Mask-conditioned, style-consistent synthesis of near-eye grayscale images.
//!
//! The crate bundles a small reverse-mode autodiff engine, the normalization
//! blocks and networks built on it, a procedural eye dataset, the retrieval
//! and refinement pipeline, and deterministic single-threaded training loops.

pub mod autodiff;
pub mod blocks;
pub mod cli;
pub mod domain;
pub mod error;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod ranking;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use domain::{GrayImage, RngSeed, SegMask, StyleCode, NUM_CLASSES};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
