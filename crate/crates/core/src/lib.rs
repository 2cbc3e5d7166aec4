//! Segmentation by pixel-to-center similarity.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` tensors with a tape-based
//!   reverse-mode graph, plus [`gradcheck`] for finite-difference checks.
//! - [`similarity`]: inner-product, cosine and softmax-relative similarity,
//!   and the `-log softmax` distance built on them.
//! - [`backbone`], [`head`]: a small convolutional feature extractor, the
//!   global classifier head, and the class-center similarity head that
//!   builds per-scene class centers from a learned mask.
//! - [`losses`]: cross-entropy, Dice and the class-distance losses.
//! - [`dataset`], [`trainer`], [`metrics`]: synthetic scenes and their
//!   on-disk format, SGD training, and evaluation/analysis.

pub mod autodiff;
pub mod backbone;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod labels;
pub mod losses;
pub mod model;
pub mod metrics;
pub mod params;
pub mod seeds;
pub mod similarity;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
