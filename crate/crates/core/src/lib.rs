//! Preference-optimized fine-tuning of a small promptable segmentation model.
//!
//! The crate covers the whole pipeline: synthetic dense-object scenes,
//! a multi-mask point-prompt segmenter with low-rank adapters, online
//! preference mining over prompt sets and mask hypotheses, the hybrid
//! preference + supervised objective, training, and evaluation sweeps.

pub mod error;
pub mod eval;
pub mod losses;
pub mod mask;
pub mod mining;
pub mod model;
pub mod repro;
pub mod rng;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
pub use mask::{binarize, compute_dice, compute_iou, BinaryMask, Image, InstanceMask, LogitMap, Shape};
