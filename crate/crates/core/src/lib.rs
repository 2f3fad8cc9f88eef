//! Multi-stage video super-resolution at desk scale.
//!
//! The crate implements a three-stage recurrent VSR network (local fusion,
//! flow-guided bidirectional propagation with an auxiliary head, and
//! re-alignment that reuses the propagation stage's deformable offsets),
//! together with the pieces needed to train and evaluate it end to end:
//! a blur-downsampling degradation pipeline, a coarse-to-fine optical flow
//! estimator, modulated deformable convolution with a reference oracle,
//! Charbonnier losses, PSNR/SSIM metrics, a seeded trainer with cosine
//! annealing and checkpointing, and an ablation harness.
//!
//! Everything is driven by a small reverse-mode tape ([`autodiff`]) over
//! `ndarray` tensors, generic over `f32`/`f64`.

pub mod align;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod params;
pub mod train;

pub use error::{Error, Result};
