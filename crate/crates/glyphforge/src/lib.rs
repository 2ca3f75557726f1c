//! Glyph-conditioned latent diffusion for editing text inside images.
//!
//! The crate is organized around a small, fully synthetic training pipeline:
//!
//! - [`glyph`] — deterministic glyph geometry: bounding boxes, standard-font
//!   rendering, adaptive cropping and mask augmentation.
//! - [`encoding`] — character-separated tokenization and the per-token text
//!   encoder that produces the cross-attention text condition.
//! - [`layout`] — attention-map post-processing (threshold, blur, box
//!   derivation), the CIoU box loss and layout-layer selection.
//! - [`perception`] — one-step latent inversion and the recognizer-feature
//!   perceptual loss on the edited region.
//! - [`style`] — style/content decoupling by feature subtraction, the
//!   mask-restricted style adapter and in-context reference canvases.
//! - [`diffusion`] — the latent codec, noise schedule, conditional denoiser,
//!   training loop and sampler.
//! - [`data`] — the synthetic corpus generator with ground-truth alphas,
//!   text-free backgrounds and per-character boxes.
//! - [`eval`] — recognition-based exact-match accuracy and normalized edit
//!   distance reporting.
//! - [`config`] — the run configuration file and its content hash.
//!
//! All randomness flows from explicit seeds; every operation that takes a
//! seed is deterministic given its arguments.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod glyph;
pub mod grid;
pub mod layout;
pub mod nn;
pub mod perception;
pub mod rngutil;
pub mod style;

pub use error::{Error, Result};
pub use glyph::{BBox, CharBox, GlyphImage, MaskImage};
