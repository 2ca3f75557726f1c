//! Deterministic scene synthesis: styled text rendered over procedural
//! backgrounds with exact integer alpha compositing, so every sample
//! ships with a byte-reproducible ground truth.

use image::{GrayImage, RgbImage};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::glyph::render::blit_scaled;
use crate::glyph::{augment_mask, render_glyph, BBox, BitmapFont, CharBox, FONT_SANS};
use crate::grid::Grid;
use crate::rngutil::{derive_seed, RngStream};

use super::{
    composite_channel, EditSample, Fill, GradientAxis, Outline, Shadow, StyleSpec,
};

/// Minimum accepted glyph scale; below this the text would be
/// unreadable at the working resolution.
const MIN_SCALE: f64 = 0.1;
/// Required luminance gap between fill and background mean.
const FILL_CONTRAST: f64 = 70.0;
/// Required luminance gap for decoration colors.
const DECOR_CONTRAST: f64 = 40.0;

/// A fully rendered scene before edit-specific fields are attached.
#[derive(Debug, Clone)]
pub struct Scene {
    pub background: RgbImage,
    /// Flattened text layer color (fill, outline and shadow combined).
    pub text_rgb: RgbImage,
    /// Combined text alpha.
    pub alpha: GrayImage,
    /// Fill-only alpha; the per-character boxes bound exactly this.
    pub fill_alpha: GrayImage,
    /// `composite(background, text_rgb, alpha)`, channel-exact.
    pub image: RgbImage,
    pub text: String,
    pub char_boxes: Vec<CharBox>,
    pub style: StyleSpec,
}

fn luma(c: [u8; 3]) -> f64 {
    0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64
}

/// Moves `c` along the line toward white or black until its luminance
/// equals `target`; exact because luminance is affine in the channels.
fn retarget_luma(c: [u8; 3], target: f64) -> [u8; 3] {
    let l = luma(c);
    let mut out = [0u8; 3];
    if target >= l {
        let t = if l >= 255.0 { 0.0 } else { (target - l) / (255.0 - l) };
        for i in 0..3 {
            out[i] = (c[i] as f64 + t * (255.0 - c[i] as f64)).round().clamp(0.0, 255.0) as u8;
        }
    } else {
        let t = if l <= 0.0 { 0.0 } else { target / l };
        for i in 0..3 {
            out[i] = (c[i] as f64 * t).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

fn enforce_contrast(c: [u8; 3], bg_luma: f64, min_gap: f64) -> [u8; 3] {
    if (luma(c) - bg_luma).abs() >= min_gap {
        return c;
    }
    let target = if bg_luma >= 128.0 {
        (bg_luma - min_gap - 40.0).max(5.0)
    } else {
        (bg_luma + min_gap + 40.0).min(250.0)
    };
    retarget_luma(c, target)
}

fn rand_color(rng: &mut RngStream) -> [u8; 3] {
    [
        rng.gen_index(256) as u8,
        rng.gen_index(256) as u8,
        rng.gen_index(256) as u8,
    ]
}

/// Draws a style from the configured class mix: 40% gradient fill,
/// 35% outline, 35% shadow, fonts uniform.
pub fn sample_style(rng: &mut RngStream) -> StyleSpec {
    let gradient = rng.gen_bool(0.4);
    let outlined = rng.gen_bool(0.35);
    let shadowed = rng.gen_bool(0.35);
    let font_id = BitmapFont::builtin_ids()[rng.gen_index(2)].to_string();
    let fill = if gradient {
        Fill::Gradient {
            start: rand_color(rng),
            end: rand_color(rng),
            axis: if rng.gen_bool(0.5) {
                GradientAxis::Horizontal
            } else {
                GradientAxis::Vertical
            },
        }
    } else {
        Fill::Solid { color: rand_color(rng) }
    };
    let outline = outlined.then(|| Outline {
        color: rand_color(rng),
        width: 1 + rng.gen_index(2) as u8,
    });
    let shadow = shadowed.then(|| {
        let sign = |r: &mut RngStream| if r.gen_bool(0.5) { 1i8 } else { -1 };
        Shadow {
            color: rand_color(rng),
            dx: sign(rng) * (1 + rng.gen_index(3)) as i8,
            dy: sign(rng) * (1 + rng.gen_index(3)) as i8,
            opacity: (140 + rng.gen_index(90)) as u8,
        }
    });
    StyleSpec {
        style_id: StyleSpec::class_of(&fill, outline.is_some(), shadow.is_some(), &font_id),
        fill,
        outline,
        shadow,
        font_id,
    }
}

fn sample_text(rng: &mut RngStream, chars: &[char], min_len: usize, max_len: usize) -> Result<String> {
    let pool: Vec<char> = chars
        .iter()
        .copied()
        .filter(|c| *c != '\n' && *c != ' ')
        .collect();
    if pool.is_empty() {
        return Err(Error::invalid("alphabet has no printable characters"));
    }
    let len = rng.gen_range_inclusive(min_len.max(1), max_len.max(min_len.max(1)));
    let allow_space = chars.contains(&' ');
    let mut out = String::with_capacity(len);
    let mut prev_space = true;
    for i in 0..len {
        let interior = i > 0 && i + 1 < len;
        if allow_space && interior && !prev_space && rng.gen_bool(0.1) {
            out.push(' ');
            prev_space = true;
        } else {
            out.push(pool[rng.gen_index(pool.len())]);
            prev_space = false;
        }
    }
    Ok(out)
}

fn procedural_background(rng: &mut RngStream, h: usize, w: usize) -> RgbImage {
    let mut img = RgbImage::new(w as u32, h as u32);
    match rng.gen_index(4) {
        0 => {
            let c = rand_color(rng);
            for p in img.pixels_mut() {
                p.0 = c;
            }
        }
        1 => {
            let a = rand_color(rng);
            let b = rand_color(rng);
            let theta = rng.gen_f64() * std::f64::consts::TAU;
            let (dx, dy) = (theta.cos(), theta.sin());
            let span = (w as f64 - 1.0) * dx.abs() + (h as f64 - 1.0) * dy.abs();
            let base = (dx.min(0.0) * (w as f64 - 1.0)) + (dy.min(0.0) * (h as f64 - 1.0));
            for y in 0..h {
                for x in 0..w {
                    let t = ((x as f64 * dx + y as f64 * dy - base) / span.max(1.0)).clamp(0.0, 1.0);
                    let mut c = [0u8; 3];
                    for i in 0..3 {
                        c[i] = (a[i] as f64 + t * (b[i] as f64 - a[i] as f64)).round() as u8;
                    }
                    img.put_pixel(x as u32, y as u32, image::Rgb(c));
                }
            }
        }
        2 => {
            let base = rand_color(rng);
            let amp = 10.0 + rng.gen_f64() * 30.0;
            let fx = 1.0 + rng.gen_f64() * 2.0;
            let fy = 1.0 + rng.gen_f64() * 2.0;
            let (p1, p2) = (rng.gen_f64() * std::f64::consts::TAU, rng.gen_f64() * std::f64::consts::TAU);
            for y in 0..h {
                for x in 0..w {
                    let m = (std::f64::consts::TAU * fx * x as f64 / w as f64 + p1).sin()
                        * (std::f64::consts::TAU * fy * y as f64 / h as f64 + p2).sin();
                    let mut c = [0u8; 3];
                    for i in 0..3 {
                        c[i] = (base[i] as f64 + amp * m).round().clamp(0.0, 255.0) as u8;
                    }
                    img.put_pixel(x as u32, y as u32, image::Rgb(c));
                }
            }
        }
        _ => {
            let a = rand_color(rng);
            let mut b = a;
            for i in 0..3 {
                let delta = rng.gen_index(61) as i32 - 30;
                b[i] = (a[i] as i32 + delta).clamp(0, 255) as u8;
            }
            let cell = [8usize, 16, 32][rng.gen_index(3)];
            for y in 0..h {
                for x in 0..w {
                    let c = if ((x / cell) + (y / cell)) % 2 == 0 { a } else { b };
                    img.put_pixel(x as u32, y as u32, image::Rgb(c));
                }
            }
        }
    }
    img
}

fn mean_luma(img: &RgbImage) -> f64 {
    let mut acc = 0.0;
    for p in img.pixels() {
        acc += luma(p.0);
    }
    acc / (img.width() as f64 * img.height() as f64)
}

/// Renders the fill coverage of `text` at natural advances; returns the
/// [0,1] coverage grid plus the tight ink box of every inked character,
/// in text order.
fn render_fill(
    text: &str,
    font: &BitmapFont,
    scale: f64,
    origin_x: f64,
    top_y: f64,
    h: usize,
    w: usize,
) -> Result<(Grid, Vec<CharBox>)> {
    let clip = BBox::new(0, 0, w as i32, h as i32)?;
    let mut grid = Grid::zeros(w, h);
    let mut boxes = Vec::new();
    let mut pen = origin_x;
    for ch in text.chars() {
        let g = font
            .glyph(ch)
            .ok_or_else(|| Error::UnknownChars(vec![ch]))?;
        if g.width > 0 && g.height > 0 {
            let dst_x = pen + scale * g.left as f64;
            let dst_y = top_y + scale * g.top as f64;
            if let Some(ink) = blit_scaled(&mut grid, g, dst_x, dst_y, scale, &clip) {
                boxes.push(CharBox { ch, bbox: ink });
            }
        }
        pen += scale * g.advance as f64;
    }
    if boxes.is_empty() {
        return Err(Error::Geometry("text rendered no ink".into()));
    }
    Ok((grid, boxes))
}

/// Chebyshev dilation of a coverage grid by `radius` pixels.
fn dilate(src: &Grid, radius: i32) -> Grid {
    let mut out = Grid::zeros(src.w, src.h);
    for y in 0..src.h as i32 {
        for x in 0..src.w as i32 {
            let mut m = 0.0f32;
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let (sx, sy) = (x + dx, y + dy);
                    if sx >= 0 && sy >= 0 && (sx as usize) < src.w && (sy as usize) < src.h {
                        m = m.max(src.get(sx as usize, sy as usize));
                    }
                }
            }
            out.set(x as usize, y as usize, m);
        }
    }
    out
}

fn shift(src: &Grid, dx: i32, dy: i32) -> Grid {
    let mut out = Grid::zeros(src.w, src.h);
    for y in 0..src.h as i32 {
        for x in 0..src.w as i32 {
            let (sx, sy) = (x - dx, y - dy);
            if sx >= 0 && sy >= 0 && (sx as usize) < src.w && (sy as usize) < src.h {
                out.set(x as usize, y as usize, src.get(sx as usize, sy as usize));
            }
        }
    }
    out
}

fn coverage_to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8
}

/// `src` over `dst`, straight-alpha u8 with deterministic rounding.
fn over_px(dst_c: &mut [u8; 3], dst_a: &mut u8, src_c: [u8; 3], src_a: u8) {
    if src_a == 0 {
        return;
    }
    let sa = src_a as u32;
    let da = *dst_a as u32;
    let keep = (da * (255 - sa) + 127) / 255;
    let out_a = sa + keep;
    for i in 0..3 {
        let num = src_c[i] as u32 * sa + dst_c[i] as u32 * keep;
        dst_c[i] = ((num + out_a / 2) / out_a) as u8;
    }
    *dst_a = out_a as u8;
}

fn fill_color_at(fill: &Fill, extent: &BBox, x: i32, y: i32) -> [u8; 3] {
    match fill {
        Fill::Solid { color } => *color,
        Fill::Gradient { start, end, axis } => {
            let t = match axis {
                GradientAxis::Horizontal => {
                    (x - extent.x0) as f64 / (extent.width() as f64 - 1.0).max(1.0)
                }
                GradientAxis::Vertical => {
                    (y - extent.y0) as f64 / (extent.height() as f64 - 1.0).max(1.0)
                }
            }
            .clamp(0.0, 1.0);
            let mut c = [0u8; 3];
            for i in 0..3 {
                c[i] = (start[i] as f64 + t * (end[i] as f64 - start[i] as f64)).round() as u8;
            }
            c
        }
    }
}

/// Renders a complete scene for `seed`. With `style_override` the
/// appearance is pinned (used by style-transfer probe sets) while text,
/// placement and background still follow the seed.
pub fn render_scene(seed: u64, cfg: &RunConfig, style_override: Option<&StyleSpec>) -> Result<Scene> {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = RngStream::new(seed);
    let alphabet = cfg.alphabet()?;
    let text = sample_text(&mut rng, alphabet.chars(), cfg.min_text_len, cfg.max_text_len)?;
    let mut style = match style_override {
        Some(s) => s.clone(),
        None => sample_style(&mut rng),
    };
    let font = BitmapFont::builtin(&style.font_id)?;

    let background = procedural_background(&mut rng, h, w);
    let bg_luma = mean_luma(&background);

    if style_override.is_none() {
        style.fill = match style.fill {
            Fill::Solid { color } => Fill::Solid {
                color: enforce_contrast(color, bg_luma, FILL_CONTRAST),
            },
            Fill::Gradient { start, end, axis } => Fill::Gradient {
                start: enforce_contrast(start, bg_luma, FILL_CONTRAST),
                end: enforce_contrast(end, bg_luma, FILL_CONTRAST),
                axis,
            },
        };
        if let Some(o) = &mut style.outline {
            o.color = enforce_contrast(o.color, bg_luma, DECOR_CONTRAST);
        }
        if let Some(s) = &mut style.shadow {
            s.color = enforce_contrast(s.color, bg_luma, DECOR_CONTRAST);
        }
    }

    let line_h = font.line_height() as f64;
    let nat_w = font.line_advance(&text)? as f64;
    let scale_h = (0.40 + 0.25 * rng.gen_f64()) * h as f64 / line_h;
    let scale_w = (w as f64 - 12.0) / nat_w.max(1.0);
    let scale = scale_h.min(scale_w);
    if scale < MIN_SCALE {
        return Err(Error::Geometry(format!(
            "text {text:?} cannot fit {h}x{w} canvas legibly"
        )));
    }
    let width_px = scale * nat_w;
    let origin_x = 6.0 + rng.gen_f64() * (w as f64 - 12.0 - width_px).max(0.0);
    let top_y = 3.0 + rng.gen_f64() * (h as f64 - 6.0 - scale * line_h).max(0.0);

    let (fill_cov, char_boxes) = render_fill(&text, font, scale, origin_x, top_y, h, w)?;
    let fill_extent = crate::glyph::outer_rectangle(&char_boxes)?;

    let outline_cov = style
        .outline
        .as_ref()
        .map(|o| dilate(&fill_cov, o.width as i32));
    let shadow_cov = style
        .shadow
        .as_ref()
        .map(|s| shift(&fill_cov, s.dx as i32, s.dy as i32));

    let mut text_rgb = RgbImage::new(w as u32, h as u32);
    let mut alpha = GrayImage::new(w as u32, h as u32);
    let mut image = RgbImage::new(w as u32, h as u32);
    let mut fill_alpha = GrayImage::new(w as u32, h as u32);

    for y in 0..h {
        for x in 0..w {
            let mut c = [0u8; 3];
            let mut a = 0u8;
            if let (Some(cov), Some(s)) = (&shadow_cov, &style.shadow) {
                let raw = coverage_to_u8(cov.get(x, y));
                let sa = ((raw as u32 * s.opacity as u32 + 127) / 255) as u8;
                over_px(&mut c, &mut a, s.color, sa);
            }
            if let (Some(cov), Some(o)) = (&outline_cov, &style.outline) {
                over_px(&mut c, &mut a, o.color, coverage_to_u8(cov.get(x, y)));
            }
            let fa = coverage_to_u8(fill_cov.get(x, y));
            if fa > 0 {
                let fc = fill_color_at(&style.fill, &fill_extent, x as i32, y as i32);
                over_px(&mut c, &mut a, fc, fa);
            }
            fill_alpha.put_pixel(x as u32, y as u32, image::Luma([fa]));
            text_rgb.put_pixel(x as u32, y as u32, image::Rgb(c));
            alpha.put_pixel(x as u32, y as u32, image::Luma([a]));
            let bg = background.get_pixel(x as u32, y as u32).0;
            let mut out = [0u8; 3];
            for i in 0..3 {
                out[i] = composite_channel(bg[i], c[i], a);
            }
            image.put_pixel(x as u32, y as u32, image::Rgb(out));
        }
    }

    Ok(Scene {
        background,
        text_rgb,
        alpha,
        fill_alpha,
        image,
        text,
        char_boxes,
        style,
    })
}

/// Tight box of nonzero alpha, in pixel coordinates.
fn alpha_extent(alpha: &GrayImage) -> Result<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for (x, y, p) in alpha.enumerate_pixels() {
        if p[0] > 0 {
            x0 = x0.min(x as i64);
            y0 = y0.min(y as i64);
            x1 = x1.max(x as i64 + 1);
            y1 = y1.max(y as i64 + 1);
        }
    }
    if x0 == i64::MAX {
        return Err(Error::Geometry("alpha channel is empty".into()));
    }
    BBox::new(x0 as i32, y0 as i32, x1 as i32, y1 as i32)
}

/// Builds a complete edit sample for `seed`: scene, conditioning glyph
/// in the standard font, augmented inpainting mask and ground truth.
pub fn generate_sample(
    seed: u64,
    cfg: &RunConfig,
    style_override: Option<&StyleSpec>,
) -> Result<EditSample> {
    let scene = render_scene(seed, cfg, style_override)?;
    let edit_box = alpha_extent(&scene.alpha)?;
    let glyph = render_glyph(&scene.text, &edit_box, (cfg.height, cfg.width), FONT_SANS)?;
    let mask = augment_mask(
        &edit_box,
        (cfg.height, cfg.width),
        derive_seed(seed, "mask", 0),
        cfg.mask_expand_frac,
    )?;
    Ok(EditSample {
        sample_id: format!("{seed:016x}"),
        seed,
        image: scene.image,
        background: scene.background,
        text_rgb: scene.text_rgb,
        alpha: scene.alpha,
        text: scene.text,
        char_boxes: scene.char_boxes,
        edit_box,
        mask,
        glyph,
        style: scene.style,
        glyph_font: FONT_SANS.to_string(),
    })
}

/// Aligns ink boxes back to character positions in `text`. Characters
/// that rendered no ink (spaces) get `None`. Errors if the box list
/// does not walk `text` in order.
pub fn align_char_boxes(text: &str, boxes: &[CharBox]) -> Result<Vec<Option<BBox>>> {
    let mut out = Vec::new();
    let mut it = boxes.iter().peekable();
    for ch in text.chars() {
        match it.peek() {
            Some(cb) if cb.ch == ch => {
                out.push(Some(it.next().unwrap().bbox));
            }
            _ => out.push(None),
        }
    }
    if it.next().is_some() {
        return Err(Error::invalid(format!(
            "character boxes do not align with text {text:?}"
        )));
    }
    Ok(out)
}
