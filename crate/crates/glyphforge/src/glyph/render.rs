//! Standard-font glyph rasterization aligned to a target box.

use crate::error::{Error, Result};
use crate::grid::Grid;

use super::bbox::{BBox, CharBox};
use super::font::BitmapFont;

/// The glyph conditioning raster: grayscale coverage in [0,1] on a full
/// canvas, with all ink confined to `target_box`.
#[derive(Debug, Clone)]
pub struct GlyphImage {
    pub pixels: Grid,
    pub target_box: BBox,
    pub font_id: String,
    /// Effective rendered size in pixels (design size times layout scale).
    pub font_size: u32,
}

/// Where one character of the laid-out string landed.
#[derive(Debug, Clone, Copy)]
pub struct PlacedGlyph {
    pub ch: char,
    /// The even-spacing slot reserved for this character.
    pub slot: BBox,
    /// Tight box of the pixels actually inked, absent for blank glyphs.
    pub ink: Option<BBox>,
}

const BOX_PAD_FRAC: f64 = 0.05;

struct Placement {
    ch: char,
    slot: BBox,
    /// Canvas position of the glyph bitmap's top-left corner.
    dst: (f64, f64),
}

struct LayoutPlan {
    scale: f64,
    placements: Vec<Placement>,
}

fn split_lines(text: &str) -> Result<Vec<&str>> {
    if text.is_empty() {
        return Err(Error::invalid("empty text"));
    }
    let lines: Vec<&str> = text.split('\n').collect();
    if lines.iter().any(|l| l.is_empty()) {
        return Err(Error::invalid("empty line in text"));
    }
    Ok(lines)
}

/// Computes the uniform scale and per-character slots/positions for
/// `text` inside `target_box`: one horizontal band per line, 5% padding
/// on every band side, equal-width slots per character, ink centered in
/// its slot with baselines aligned per line.
fn layout_glyphs(text: &str, target_box: &BBox, font: &BitmapFont) -> Result<LayoutPlan> {
    let lines = split_lines(text)?;
    let missing = font.missing_chars(text);
    if !missing.is_empty() {
        return Err(Error::UnknownChars(missing));
    }

    let n = lines.len() as i32;
    let line_h = font.line_height() as f64;

    struct Band {
        inner_x0: f64,
        inner_top: f64,
        inner_w: f64,
        inner_h: f64,
        top: i32,
        bottom: i32,
    }
    let mut bands = Vec::new();
    let mut scale = f64::INFINITY;
    for (i, line) in lines.iter().enumerate() {
        let i = i as i32;
        let top = target_box.y0 + i * target_box.height() / n;
        let bottom = target_box.y0 + (i + 1) * target_box.height() / n;
        let band_w = target_box.width() as f64;
        let band_h = (bottom - top) as f64;
        let pad_x = band_w * BOX_PAD_FRAC;
        let pad_y = band_h * BOX_PAD_FRAC;
        let inner_w = band_w - 2.0 * pad_x;
        let inner_h = band_h - 2.0 * pad_y;
        if inner_w < 1.0 || inner_h < 1.0 {
            return Err(Error::Geometry(format!(
                "target box {target_box:?} too small for {n} line(s)"
            )));
        }
        let slot_w = inner_w / line.chars().count() as f64;
        let mut s = inner_h / line_h;
        for ch in line.chars() {
            let g = font.glyph(ch).expect("coverage checked above");
            if g.width > 0 {
                s = s.min(slot_w / g.width as f64);
            }
        }
        scale = scale.min(s);
        bands.push(Band {
            inner_x0: target_box.x0 as f64 + pad_x,
            inner_top: top as f64 + pad_y,
            inner_w,
            inner_h,
            top,
            bottom,
        });
    }
    if !scale.is_finite() || scale <= 0.0 {
        return Err(Error::Geometry("no positive glyph scale fits".into()));
    }

    let mut placements = Vec::new();
    for (line, band) in lines.iter().zip(&bands) {
        let len = line.chars().count() as f64;
        let slot_w = band.inner_w / len;
        let line_top = band.inner_top + (band.inner_h - scale * line_h) / 2.0;
        for (j, ch) in line.chars().enumerate() {
            let g = font.glyph(ch).expect("coverage checked above");
            let slot_x0 = band.inner_x0 + j as f64 * slot_w;
            let slot_cx = slot_x0 + slot_w / 2.0;
            let dst = (
                slot_cx - scale * g.width as f64 / 2.0,
                line_top + scale * g.top as f64,
            );
            let slot = BBox::new(
                slot_x0.floor() as i32,
                band.top,
                (slot_x0 + slot_w).ceil() as i32,
                band.bottom,
            )?;
            placements.push(Placement { ch, slot, dst });
        }
    }
    Ok(LayoutPlan { scale, placements })
}

/// Area-sampled blit of `glyph` scaled by `s` with its bitmap top-left at
/// `(dst_x, dst_y)`, clipped to `clip`; combines by max. Returns the tight
/// box of pixels that received ink.
pub(crate) fn blit_scaled(
    grid: &mut Grid,
    glyph: &super::font::GlyphBitmap,
    dst_x: f64,
    dst_y: f64,
    s: f64,
    clip: &BBox,
) -> Option<BBox> {
    if glyph.width == 0 || glyph.height == 0 {
        return None;
    }
    let px0 = (dst_x.floor() as i32).max(clip.x0).max(0);
    let py0 = (dst_y.floor() as i32).max(clip.y0).max(0);
    let px1 = ((dst_x + s * glyph.width as f64).ceil() as i32)
        .min(clip.x1)
        .min(grid.w as i32);
    let py1 = ((dst_y + s * glyph.height as f64).ceil() as i32)
        .min(clip.y1)
        .min(grid.h as i32);
    let mut touched: Option<BBox> = None;
    for py in py0..py1 {
        let v0 = (py as f64 - dst_y) / s;
        let v1 = (py as f64 + 1.0 - dst_y) / s;
        for px in px0..px1 {
            let u0 = (px as f64 - dst_x) / s;
            let u1 = (px as f64 + 1.0 - dst_x) / s;
            let mut acc = 0.0f64;
            let sy0 = v0.floor().max(0.0) as i32;
            let sy1 = (v1.ceil() as i32).min(glyph.height as i32);
            let sx0 = u0.floor().max(0.0) as i32;
            let sx1 = (u1.ceil() as i32).min(glyph.width as i32);
            for sy in sy0..sy1 {
                let wy = (v1.min(sy as f64 + 1.0) - v0.max(sy as f64)).max(0.0);
                if wy == 0.0 {
                    continue;
                }
                for sx in sx0..sx1 {
                    let wx = (u1.min(sx as f64 + 1.0) - u0.max(sx as f64)).max(0.0);
                    if wx > 0.0 {
                        acc += wx * wy * glyph.alpha(sx, sy) as f64;
                    }
                }
            }
            let v = ((s * s * acc) / 255.0).clamp(0.0, 1.0) as f32;
            if v > 0.0 {
                let cur = grid.get(px as usize, py as usize);
                grid.set(px as usize, py as usize, cur.max(v));
                let p = BBox {
                    x0: px,
                    y0: py,
                    x1: px + 1,
                    y1: py + 1,
                };
                touched = Some(touched.map_or(p, |t| t.union(&p)));
            }
        }
    }
    touched
}

/// Renders `text` in the bundled standard font `font_id`, uniformly
/// scaled and evenly spaced inside `target_box`, on a zero canvas of
/// `canvas_hw = (height, width)`. Also reports where each character
/// landed.
pub fn render_glyph_with_placements(
    text: &str,
    target_box: &BBox,
    canvas_hw: (usize, usize),
    font_id: &str,
) -> Result<(GlyphImage, Vec<PlacedGlyph>)> {
    let (h, w) = canvas_hw;
    if target_box.x0 < 0
        || target_box.y0 < 0
        || target_box.x1 > w as i32
        || target_box.y1 > h as i32
    {
        return Err(Error::Geometry(format!(
            "target box {target_box:?} outside {h}x{w} canvas"
        )));
    }
    let font = BitmapFont::builtin(font_id)?;
    let plan = layout_glyphs(text, target_box, font)?;
    let mut pixels = Grid::zeros(w, h);
    let mut placed = Vec::with_capacity(plan.placements.len());
    for p in &plan.placements {
        let g = font.glyph(p.ch).expect("validated in layout");
        let ink = blit_scaled(&mut pixels, g, p.dst.0, p.dst.1, plan.scale, target_box);
        placed.push(PlacedGlyph {
            ch: p.ch,
            slot: p.slot,
            ink,
        });
    }
    let image = GlyphImage {
        pixels,
        target_box: *target_box,
        font_id: font_id.to_string(),
        font_size: ((font.px_size as f64 * plan.scale).round() as u32).max(1),
    };
    Ok((image, placed))
}

/// [`render_glyph_with_placements`] without the placement report.
pub fn render_glyph(
    text: &str,
    target_box: &BBox,
    canvas_hw: (usize, usize),
    font_id: &str,
) -> Result<GlyphImage> {
    Ok(render_glyph_with_placements(text, target_box, canvas_hw, font_id)?.0)
}

/// Renders each character scaled to fit its own box (ink centered),
/// used when glyph conditioning must follow existing character
/// positions instead of an even layout.
pub fn render_chars_at_boxes(
    chars: &[CharBox],
    canvas_hw: (usize, usize),
    font_id: &str,
) -> Result<Grid> {
    let (h, w) = canvas_hw;
    let font = BitmapFont::builtin(font_id)?;
    let mut grid = Grid::zeros(w, h);
    for cb in chars {
        if cb.ch == '\n' {
            return Err(Error::invalid("newline has no box"));
        }
        let g = font
            .glyph(cb.ch)
            .ok_or_else(|| Error::UnknownChars(vec![cb.ch]))?;
        if g.width == 0 || g.height == 0 {
            continue;
        }
        let s = (cb.bbox.width() as f64 / g.width as f64)
            .min(cb.bbox.height() as f64 / g.height as f64);
        if s <= 0.0 {
            return Err(Error::Geometry(format!("box {:?} too small", cb.bbox)));
        }
        let (cx, cy) = cb.bbox.center();
        let dst_x = cx - s * g.width as f64 / 2.0;
        let dst_y = cy - s * g.height as f64 / 2.0;
        let clip = cb.bbox.clamp_to(h as i32, w as i32)?;
        blit_scaled(&mut grid, g, dst_x, dst_y, s, &clip);
    }
    Ok(grid)
}
