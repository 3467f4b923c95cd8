//! Numeric building blocks for exposure-aware one-step HDR reconstruction.
//!
//! Everything here works on [`ImageF`], a dense row-major `H×W×C` buffer of
//! `f64` values. Linear HDR radiance, display-referred LDR, soft masks and
//! network latents all travel in the same type.

pub mod colorspace;
pub mod datagen;
pub mod error;
pub mod expomask;
pub mod hdrio;
pub mod image;
pub mod metrics;
pub mod par;
pub mod rng;
pub mod trajectory;

pub use error::{Error, Result};
pub use expomask::{compute_masks, ExposureMasks, MaskConfig};
pub use image::{gaussian_blur, percentile, ImageF};
pub use rng::SeededRng;
pub use trajectory::{Schedule, TrajectoryMode};
