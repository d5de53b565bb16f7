//! Handwritten text recognition for Cyrillic word images, built from scratch:
//! a small reverse-mode autodiff tensor core, the CNN/BLSTM/CTC model zoo,
//! best-path / beam-search / dictionary-constrained decoders, edit-distance
//! metrics, projection-profile preprocessing and segmentation, and a
//! deterministic training loop with binary checkpoints.
//!
//! Shape conventions are fixed throughout: sequences are `[time, features]`
//! and images are `[height, width, channels]`, both row-major `f64`.

pub mod ctc;
pub mod data;
pub mod decode;
pub mod imaging;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod segment;
pub mod train;

mod error;

pub use error::{Error, Result};
