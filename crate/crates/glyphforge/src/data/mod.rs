//! Synthetic corpus: fully labeled edit samples with ground-truth
//! auxiliaries (text alpha, text-free background, per-character boxes)
//! standing in for the external detector/segmenter/eraser models.

mod io;
mod synth;

pub use io::{
    generate_corpus, generate_corpus_with_workers, list_sample_ids, load_manifest, load_sample,
    save_sample, Manifest, MANIFEST_FILE, META_SCHEMA_VERSION,
};
pub use synth::{align_char_boxes, generate_sample, render_scene, sample_style, Scene};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::glyph::{BBox, CharBox, GlyphImage, MaskImage};

/// Linear-gradient direction across the text's outer rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientAxis {
    Horizontal,
    Vertical,
}

/// Text fill paint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    Solid { color: [u8; 3] },
    Gradient {
        start: [u8; 3],
        end: [u8; 3],
        axis: GradientAxis,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outline {
    pub color: [u8; 3],
    pub width: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shadow {
    pub color: [u8; 3],
    pub dx: i8,
    pub dy: i8,
    /// Alpha multiplier in [0,255].
    pub opacity: u8,
}

/// A deterministic text appearance: paint, decoration and font.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    /// Discrete class index: bit 0 gradient, bit 1 outline, bit 2
    /// shadow, bit 3 serif font.
    pub style_id: u32,
    pub fill: Fill,
    pub outline: Option<Outline>,
    pub shadow: Option<Shadow>,
    pub font_id: String,
}

impl StyleSpec {
    /// Recomputes the class index from the present features.
    pub fn class_of(fill: &Fill, outline: bool, shadow: bool, font_id: &str) -> u32 {
        let mut id = 0;
        if matches!(fill, Fill::Gradient { .. }) {
            id |= 1;
        }
        if outline {
            id |= 2;
        }
        if shadow {
            id |= 4;
        }
        if font_id == crate::glyph::FONT_SERIF {
            id |= 8;
        }
        id
    }

    /// Two deliberately far-apart styles for style-transfer probes.
    pub fn probe_styles() -> [StyleSpec; 2] {
        [
            StyleSpec {
                style_id: Self::class_of(&Fill::Solid { color: [220, 40, 30] }, true, false, "sans"),
                fill: Fill::Solid { color: [220, 40, 30] },
                outline: Some(Outline {
                    color: [20, 20, 20],
                    width: 1,
                }),
                shadow: None,
                font_id: crate::glyph::FONT_SANS.to_string(),
            },
            StyleSpec {
                style_id: Self::class_of(
                    &Fill::Gradient {
                        start: [40, 90, 230],
                        end: [40, 220, 140],
                        axis: GradientAxis::Horizontal,
                    },
                    false,
                    false,
                    "serif",
                ),
                fill: Fill::Gradient {
                    start: [40, 90, 230],
                    end: [40, 220, 140],
                    axis: GradientAxis::Horizontal,
                },
                outline: None,
                shadow: None,
                font_id: crate::glyph::FONT_SERIF.to_string(),
            },
        ]
    }
}

/// One training/eval record with every ground truth the pipeline needs.
#[derive(Debug, Clone)]
pub struct EditSample {
    pub sample_id: String,
    pub seed: u64,
    pub image: RgbImage,
    /// The same scene without any text.
    pub background: RgbImage,
    /// Flattened text layer color; meaningless where `alpha` is zero.
    pub text_rgb: RgbImage,
    /// Text coverage in [0,255]; divide by 255 for the unit-interval
    /// alpha.
    pub alpha: GrayImage,
    pub text: String,
    pub char_boxes: Vec<CharBox>,
    pub edit_box: BBox,
    pub mask: MaskImage,
    pub glyph: GlyphImage,
    pub style: StyleSpec,
    /// Font used for the conditioning glyph raster.
    pub glyph_font: String,
}

impl EditSample {
    /// Alpha at a pixel as a unit-interval float.
    pub fn alpha_at(&self, x: u32, y: u32) -> f32 {
        self.alpha.get_pixel(x, y)[0] as f32 / 255.0
    }
}

/// Exact u8 alpha composite used everywhere a text layer meets a
/// background: `(bg·(255−a) + c·a + 127) / 255` per channel.
pub fn composite_channel(bg: u8, c: u8, a: u8) -> u8 {
    ((bg as u32 * (255 - a as u32) + c as u32 * a as u32 + 127) / 255) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_is_exact_at_the_extremes() {
        for bg in [0u8, 1, 77, 128, 254, 255] {
            for c in [0u8, 9, 200, 255] {
                assert_eq!(composite_channel(bg, c, 0), bg, "a=0 must keep background");
                assert_eq!(composite_channel(bg, c, 255), c, "a=255 must take color");
            }
        }
    }

    #[test]
    fn style_class_bits_cover_all_features() {
        let g = Fill::Gradient {
            start: [0, 0, 0],
            end: [255, 255, 255],
            axis: GradientAxis::Vertical,
        };
        assert_eq!(StyleSpec::class_of(&Fill::Solid { color: [0; 3] }, false, false, "sans"), 0);
        assert_eq!(StyleSpec::class_of(&g, true, true, "serif"), 0b1111);
    }

    #[test]
    fn probe_styles_differ_in_class() {
        let [a, b] = StyleSpec::probe_styles();
        assert_ne!(a.style_id, b.style_id);
        assert_ne!(a.font_id, b.font_id);
    }
}
