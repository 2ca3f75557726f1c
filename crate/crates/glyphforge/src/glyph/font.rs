//! Bundled bitmap fonts.
//!
//! Fonts are stored as JSON: global vertical metrics plus one tightly
//! cropped 8-bit alpha bitmap per character (base64-encoded, row-major).
//! Coordinates follow the line-box convention: row 0 is the ascender
//! line, the baseline sits at `ascent`, and the box ends at
//! `ascent + descent`.

use std::collections::HashMap;
use std::sync::OnceLock;

use base64::Engine;
use serde::Deserialize;

use crate::error::{Error, Result};

pub const FONT_SANS: &str = "sans";
pub const FONT_SERIF: &str = "serif";

const FONT_SANS_JSON: &str = include_str!("../../assets/fonts/sans.json");
const FONT_SERIF_JSON: &str = include_str!("../../assets/fonts/serif.json");

/// One character's alpha bitmap and horizontal metrics, all in pixels at
/// the font's design size.
#[derive(Debug, Clone)]
pub struct GlyphBitmap {
    pub width: u32,
    pub height: u32,
    /// Horizontal offset of the bitmap from the pen position.
    pub left: i32,
    /// Vertical offset of the bitmap's first row from the ascender line.
    pub top: i32,
    /// Pen advance to the next character.
    pub advance: u32,
    bitmap: Vec<u8>,
}

impl GlyphBitmap {
    /// Alpha in [0,255] at bitmap-local coordinates; 0 outside.
    pub fn alpha(&self, x: i32, y: i32) -> u8 {
        if x < 0 || y < 0 || x >= self.width as i32 || y >= self.height as i32 {
            return 0;
        }
        self.bitmap[y as usize * self.width as usize + x as usize]
    }

    /// Width of the inked extent measured from the pen position.
    pub fn ink_extent(&self) -> u32 {
        (self.left + self.width as i32).max(self.advance as i32).max(1) as u32
    }
}

#[derive(Debug, Deserialize)]
struct GlyphJson {
    width: u32,
    height: u32,
    left: i32,
    top: i32,
    advance: u32,
    bitmap: String,
}

#[derive(Debug, Deserialize)]
struct FontJson {
    name: String,
    px_size: u32,
    ascent: u32,
    descent: u32,
    glyphs: HashMap<String, GlyphJson>,
}

/// A fixed-size raster font covering the configured alphabet.
#[derive(Debug, Clone)]
pub struct BitmapFont {
    pub name: String,
    /// Design size in pixels the bitmaps were rasterized at.
    pub px_size: u32,
    pub ascent: u32,
    pub descent: u32,
    glyphs: HashMap<char, GlyphBitmap>,
}

impl BitmapFont {
    pub fn from_json_str(json: &str) -> Result<Self> {
        let raw: FontJson = serde_json::from_str(json)?;
        let mut glyphs = HashMap::new();
        for (key, g) in raw.glyphs {
            let mut chars = key.chars();
            let ch = match (chars.next(), chars.next()) {
                (Some(c), None) => c,
                _ => return Err(Error::Font(format!("glyph key {key:?} is not one char"))),
            };
            let bitmap = base64::engine::general_purpose::STANDARD
                .decode(g.bitmap.as_bytes())
                .map_err(|e| Error::Font(format!("glyph {ch:?}: {e}")))?;
            if bitmap.len() != (g.width * g.height) as usize {
                return Err(Error::Font(format!(
                    "glyph {ch:?}: bitmap length {} != {}x{}",
                    bitmap.len(),
                    g.width,
                    g.height
                )));
            }
            glyphs.insert(
                ch,
                GlyphBitmap {
                    width: g.width,
                    height: g.height,
                    left: g.left,
                    top: g.top,
                    advance: g.advance,
                    bitmap,
                },
            );
        }
        if raw.ascent + raw.descent == 0 {
            return Err(Error::Font("zero line height".into()));
        }
        Ok(BitmapFont {
            name: raw.name,
            px_size: raw.px_size,
            ascent: raw.ascent,
            descent: raw.descent,
            glyphs,
        })
    }

    /// Height of one line box at design size.
    pub fn line_height(&self) -> u32 {
        self.ascent + self.descent
    }

    pub fn glyph(&self, ch: char) -> Option<&GlyphBitmap> {
        self.glyphs.get(&ch)
    }

    /// Characters of `text` missing from this font, in first-seen order.
    pub fn missing_chars(&self, text: &str) -> Vec<char> {
        let mut missing = Vec::new();
        for ch in text.chars() {
            if ch != '\n' && !self.glyphs.contains_key(&ch) && !missing.contains(&ch) {
                missing.push(ch);
            }
        }
        missing
    }

    /// Natural width of a single line at design size (sum of advances).
    pub fn line_advance(&self, line: &str) -> Result<u32> {
        let missing = self.missing_chars(line);
        if !missing.is_empty() {
            return Err(Error::UnknownChars(missing));
        }
        Ok(line
            .chars()
            .map(|c| self.glyphs[&c].advance)
            .sum())
    }

    /// A bundled font by identifier (`sans` or `serif`), parsed once.
    pub fn builtin(font_id: &str) -> Result<&'static BitmapFont> {
        static SANS: OnceLock<BitmapFont> = OnceLock::new();
        static SERIF: OnceLock<BitmapFont> = OnceLock::new();
        let (cell, json) = match font_id {
            FONT_SANS => (&SANS, FONT_SANS_JSON),
            FONT_SERIF => (&SERIF, FONT_SERIF_JSON),
            other => return Err(Error::Font(format!("unknown font id {other:?}"))),
        };
        if cell.get().is_none() {
            let font = BitmapFont::from_json_str(json)?;
            let _ = cell.set(font);
        }
        Ok(cell.get().expect("font cell initialized above"))
    }

    pub fn builtin_ids() -> &'static [&'static str] {
        &[FONT_SANS, FONT_SERIF]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_fonts_parse_and_cover_alphabet() {
        for id in BitmapFont::builtin_ids() {
            let font = BitmapFont::builtin(id).unwrap();
            assert!(font.line_height() > 0);
            for ch in ('A'..='Z').chain('0'..='9').chain([' ']) {
                let g = font
                    .glyph(ch)
                    .unwrap_or_else(|| panic!("{id} missing {ch:?}"));
                assert!(g.advance > 0, "{id} {ch:?} has zero advance");
            }
        }
    }

    #[test]
    fn letters_have_ink_and_space_does_not() {
        let font = BitmapFont::builtin(FONT_SANS).unwrap();
        let a = font.glyph('A').unwrap();
        assert!(a.width > 0 && a.height > 0);
        assert!((0..a.height as i32)
            .any(|y| (0..a.width as i32).any(|x| a.alpha(x, y) > 0)));
        let sp = font.glyph(' ').unwrap();
        let blank = (0..sp.height as i32)
            .all(|y| (0..sp.width as i32).all(|x| sp.alpha(x, y) == 0));
        assert!(blank);
    }

    #[test]
    fn glyph_ink_fits_line_box() {
        for id in BitmapFont::builtin_ids() {
            let font = BitmapFont::builtin(id).unwrap();
            for ch in ('A'..='Z').chain('0'..='9') {
                let g = font.glyph(ch).unwrap();
                assert!(g.top >= 0, "{id} {ch:?} top {}", g.top);
                assert!(
                    g.top + g.height as i32 <= font.line_height() as i32,
                    "{id} {ch:?} bottom {}",
                    g.top + g.height as i32
                );
                // Small side bearings are tolerated; layout scales by ink extent.
                assert!(g.left.abs() <= font.px_size as i32 / 4);
                assert!(g.ink_extent() <= g.advance + font.px_size / 4);
            }
        }
    }

    #[test]
    fn missing_chars_reports_offenders_once() {
        let font = BitmapFont::builtin(FONT_SANS).unwrap();
        assert_eq!(font.missing_chars("AB\nBA"), Vec::<char>::new());
        assert_eq!(font.missing_chars("A!?!"), vec!['!', '?']);
    }

    #[test]
    fn line_advance_is_sum_of_advances() {
        let font = BitmapFont::builtin(FONT_SANS).unwrap();
        let a = font.glyph('A').unwrap().advance;
        let b = font.glyph('B').unwrap().advance;
        assert_eq!(font.line_advance("AB").unwrap(), a + b);
        assert!(font.line_advance("a").is_err());
    }

    #[test]
    fn unknown_font_id_errors() {
        assert!(BitmapFont::builtin("cursive").is_err());
    }
}
