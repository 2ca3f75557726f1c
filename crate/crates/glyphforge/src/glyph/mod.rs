//! Deterministic glyph geometry: boxes, standard-font rendering, adaptive
//! cropping and mask augmentation.
//!
//! Everything here is a pure function of its arguments (plus an explicit
//! seed where noted) and safe to call concurrently.

mod bbox;
mod crop;
mod font;
mod mask;
pub(crate) mod render;

pub use bbox::{outer_rectangle, BBox, CharBox};
pub use crop::{adaptive_crop, AdaptiveCropParams};
pub use font::{BitmapFont, GlyphBitmap, FONT_SANS, FONT_SERIF};
pub use mask::{augment_mask, MaskImage};
pub use render::{
    render_chars_at_boxes, render_glyph, render_glyph_with_placements, GlyphImage, PlacedGlyph,
};
