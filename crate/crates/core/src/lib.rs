//! Deformable multi-modal 2D image registration.
//!
//! Aligns a moving image to a fixed image of a different modality through a
//! dense displacement field, estimated either by a trained encoder-decoder
//! network (unsupervised mutual-information loss or supervised MSE loss) or by
//! direct per-pair optimisation. Includes elastic augmentation, synthetic
//! phantom generation and the Dice / mutual-information / Mann-Whitney
//! evaluation suite.

pub mod augment;
pub mod error;
pub mod evalstats;
pub mod field;
pub mod imagecore;
pub mod losses;
pub mod network;
pub mod pipeline;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
pub use field::DisplacementField;
pub use imagecore::{GrayImage, RgbImage};
