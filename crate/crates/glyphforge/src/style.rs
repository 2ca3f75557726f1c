//! Style/content disentanglement and injection: random style crops,
//! alpha segmentation, feature subtraction against the glyph rendering,
//! the mask-restricted cross-attention adapter, and in-context
//! reference strips.

use candle_core::{Module, Tensor};
use candle_nn::Linear;
use image::{GrayImage, RgbImage};

use crate::config::RunConfig;
use crate::data::EditSample;
use crate::error::{Error, Result};
use crate::glyph::{outer_rectangle, BBox, CharBox};
use crate::grid::Grid;
use crate::nn::{linear_no_bias, Init, ParamStore};
use crate::perception::{resize_bilinear, rgb_to_tensor, Recognizer};
use crate::rngutil::RngStream;

/// Fill value for in-context strip pixels outside the pasted
/// reference (neutral gray 0.5).
pub const STRIP_FILL: u8 = 128;

/// A style source crop with its glyph counterpart and the
/// background-removed segmentation.
#[derive(Debug, Clone)]
pub struct StyleCropPair {
    pub styled_crop: RgbImage,
    pub glyph_crop: Grid,
    pub segmented: RgbImage,
    /// Where the crop was taken, in image coordinates.
    pub region: BBox,
}

/// Style tokens plus the pre-projection feature difference they came
/// from.
#[derive(Debug, Clone)]
pub struct StyleFeature {
    /// `f(x_S) − f(glyph crop)`, `[B, feat]`.
    pub pre_projection: Tensor,
    /// Projected style tokens `[B, N_s, D_s]`.
    pub tokens: Tensor,
}

/// The in-context reference canvas: the sample image with one
/// character erased, plus a strip below holding that character's
/// segmented rendering.
#[derive(Debug, Clone)]
pub struct InContextCanvas {
    /// `(H + strip, W)` image.
    pub image: RgbImage,
    /// The strip rows, entirely below the original image.
    pub strip_region: BBox,
    /// The erased reference character, box in original image
    /// coordinates.
    pub reference: CharBox,
}

/// Outcome of in-context construction in training.
#[derive(Debug, Clone)]
pub enum InContext {
    Built(InContextCanvas),
    /// Samples with fewer than two inked characters cannot donate a
    /// reference and keep their plain canvas.
    SkippedSingleChar,
}

fn crop_rgb(img: &RgbImage, b: &BBox) -> RgbImage {
    image::imageops::crop_imm(
        img,
        b.x0 as u32,
        b.y0 as u32,
        b.width() as u32,
        b.height() as u32,
    )
    .to_image()
}

fn crop_gray(img: &GrayImage, b: &BBox) -> GrayImage {
    image::imageops::crop_imm(
        img,
        b.x0 as u32,
        b.y0 as u32,
        b.width() as u32,
        b.height() as u32,
    )
    .to_image()
}

/// `image·alpha/255` per pixel: background pixels (alpha 0) become
/// exactly zero.
fn segment_by_alpha(img: &RgbImage, alpha: &GrayImage) -> RgbImage {
    let mut out = RgbImage::new(img.width(), img.height());
    for (x, y, p) in img.enumerate_pixels() {
        let a = alpha.get_pixel(x, y)[0] as u32;
        let mut c = [0u8; 3];
        for i in 0..3 {
            c[i] = ((p.0[i] as u32 * a + 127) / 255) as u8;
        }
        out.put_pixel(x, y, image::Rgb(c));
    }
    out
}

/// Selects a seeded random contiguous run of inked characters and
/// crops the styled image, the glyph raster and the alpha-segmented
/// style source to the run's outer rectangle.
pub fn sample_style_crop(sample: &EditSample, rng_seed: u64) -> Result<StyleCropPair> {
    if sample.char_boxes.is_empty() {
        return Err(Error::invalid("sample has no inked characters"));
    }
    let mut rng = RngStream::new(rng_seed);
    let k = sample.char_boxes.len();
    let n = rng.gen_range_inclusive(1, k);
    let start = rng.gen_range_inclusive(0, k - n);
    let run = &sample.char_boxes[start..start + n];
    let region = outer_rectangle(run)?
        .clamp_to(sample.image.height() as i32, sample.image.width() as i32)?;
    let styled_crop = crop_rgb(&sample.image, &region);
    let alpha_crop = crop_gray(&sample.alpha, &region);
    let segmented = segment_by_alpha(&styled_crop, &alpha_crop);
    let mut glyph_crop = Grid::zeros(region.width() as usize, region.height() as usize);
    for y in 0..region.height() as usize {
        for x in 0..region.width() as usize {
            glyph_crop.set(
                x,
                y,
                sample
                    .glyph
                    .pixels
                    .get(region.x0 as usize + x, region.y0 as usize + y),
            );
        }
    }
    Ok(StyleCropPair {
        styled_crop,
        glyph_crop,
        segmented,
        region,
    })
}

/// The learned projection from extractor features to style tokens.
pub struct StyleExtractor {
    proj: Linear,
    n_tokens: usize,
    d_s: usize,
}

impl StyleExtractor {
    pub fn new(store: &mut ParamStore, cfg: &RunConfig, feat_dim: usize) -> Result<Self> {
        let mut rng = RngStream::derive(cfg.seed, "style-proj-init", 0);
        let proj = linear_no_bias(
            store,
            &mut rng,
            "style.proj",
            feat_dim,
            cfg.style_tokens * cfg.style_dim,
        )?;
        Ok(StyleExtractor {
            proj,
            n_tokens: cfg.style_tokens,
            d_s: cfg.style_dim,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    /// Frozen-trunk features of an arbitrary-size `[B, 3, H, W]` region
    /// in [0,1].
    pub fn features(&self, recognizer: &Recognizer, region: &Tensor) -> Result<Tensor> {
        let (h, w) = recognizer.input_hw();
        recognizer.style_features(&resize_bilinear(&region.detach(), h, w)?)
    }

    /// `F_S = f(x_S) − f(glyph crop)`, then the learned projection to
    /// `[B, N_s, D_s]` tokens.
    pub fn decouple(
        &self,
        recognizer: &Recognizer,
        x_s: &Tensor,
        glyph_crop: &Tensor,
    ) -> Result<StyleFeature> {
        if x_s.dims() != glyph_crop.dims() {
            return Err(Error::invalid(format!(
                "style source shape {:?} does not match glyph crop shape {:?}",
                x_s.dims(),
                glyph_crop.dims()
            )));
        }
        let fa = self.features(recognizer, x_s)?;
        let fb = self.features(recognizer, glyph_crop)?;
        let pre = (&fa - &fb)?;
        let b = pre.dims2()?.0;
        let tokens = self
            .proj
            .forward(&pre)?
            .reshape((b, self.n_tokens, self.d_s))?;
        Ok(StyleFeature {
            pre_projection: pre,
            tokens,
        })
    }
}

/// `[1, 3, H, W]` tensor in [0,1] from a grayscale glyph grid,
/// replicated over RGB.
pub fn grid_to_rgb_tensor(grid: &Grid, device: &candle_core::Device) -> Result<Tensor> {
    let (w, h) = (grid.w, grid.h);
    let mut data = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = grid.get(x, y).clamp(0.0, 1.0);
        }
    }
    let t = Tensor::from_vec(data, &[1, 1, h, w], device)?;
    Ok(t.expand(&[1, 3, h, w])?.contiguous()?)
}

/// The style-attention branch of one cross-attention layer: separate
/// key/value projections over the style tokens and a zero-initialized
/// scalar gate.
pub struct StyleAdapter {
    to_k: Linear,
    to_v: Linear,
    gate: Tensor,
    heads: usize,
}

impl StyleAdapter {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngStream,
        name: &str,
        d_s: usize,
        inner: usize,
        heads: usize,
    ) -> Result<Self> {
        if inner % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {inner} not divisible by {heads} heads"
            )));
        }
        let to_k = linear_no_bias(store, rng, &format!("{name}.to_k"), d_s, inner)?;
        let to_v = linear_no_bias(store, rng, &format!("{name}.to_v"), d_s, inner)?;
        let gate = store.var(&format!("{name}.gate"), &[1], Init::Zeros, rng)?;
        Ok(StyleAdapter {
            to_k,
            to_v,
            gate,
            heads,
        })
    }

    /// Raw style-branch attention output `[B, n_q, inner]` before
    /// masking and gating.
    fn branch(&self, q: &Tensor, style_tokens: &Tensor) -> Result<Tensor> {
        let (b, heads, n_q, d_h) = q.dims4()?;
        debug_assert_eq!(heads, self.heads);
        let (bs, n_s, _d_s) = style_tokens.dims3()?;
        if bs != b {
            return Err(Error::invalid(format!(
                "style tokens batch {bs} does not match query batch {b}"
            )));
        }
        let k = self
            .to_k
            .forward(style_tokens)?
            .reshape((b, n_s, heads, d_h))?
            .transpose(1, 2)?
            .contiguous()?;
        let v = self
            .to_v
            .forward(style_tokens)?
            .reshape((b, n_s, heads, d_h))?
            .transpose(1, 2)?
            .contiguous()?;
        let scale = 1.0 / (d_h as f64).sqrt();
        let logits = (q.contiguous()?.matmul(&k.t()?)? * scale)?;
        let probs = candle_nn::ops::softmax(&logits, 3)?;
        let out = probs.matmul(&v)?;
        Ok(out
            .transpose(1, 2)?
            .reshape((b, n_q, heads * d_h))?)
    }
}

/// Adds the mask-restricted style branch to a text cross-attention
/// output: `out = base + gate · query_mask ⊙ attn(q, K_s, V_s)`.
/// Queries outside the mask receive exactly zero style contribution;
/// a zero mask or a zero gate leaves `base` unchanged.
pub fn inject_style(
    base_out: &Tensor,
    q: &Tensor,
    style_tokens: &Tensor,
    query_mask: &Tensor,
    adapter: &StyleAdapter,
) -> Result<Tensor> {
    let (b, n_q, _inner) = base_out.dims3()?;
    if query_mask.dims() != [b, n_q] {
        return Err(Error::invalid(format!(
            "query mask shape {:?}, expected [{b}, {n_q}]",
            query_mask.dims()
        )));
    }
    let branch = adapter.branch(q, style_tokens)?;
    let masked = branch.broadcast_mul(&query_mask.unsqueeze(2)?)?;
    let gated = masked.broadcast_mul(&adapter.gate)?;
    Ok((base_out + gated)?)
}

/// Resizes `reference` aspect-preserving to the strip height, centers
/// it horizontally and writes it into the strip rows of `canvas`
/// (which must already be `image_h + strip_h` rows tall). Returns the
/// pasted box.
pub fn paste_into_strip(
    canvas: &mut RgbImage,
    image_h: usize,
    strip_h: usize,
    reference: &RgbImage,
) -> Result<BBox> {
    let w = canvas.width() as usize;
    if strip_h == 0 || canvas.height() as usize != image_h + strip_h {
        return Err(Error::invalid(format!(
            "canvas is {} rows, expected image {image_h} + strip {strip_h}",
            canvas.height()
        )));
    }
    if reference.width() == 0 || reference.height() == 0 {
        return Err(Error::invalid("empty strip reference image"));
    }
    let scale = strip_h as f64 / reference.height() as f64;
    let mut tw = ((reference.width() as f64 * scale).round() as usize).max(1);
    let mut th = strip_h;
    if tw > w {
        th = ((strip_h as f64 * w as f64 / tw as f64).floor() as usize).max(1);
        tw = w;
    }
    let ref_t = rgb_to_tensor(reference, &candle_core::Device::Cpu)?;
    let resized = resize_bilinear(&ref_t, th, tw)?;
    let data: Vec<f32> = resized.flatten_all()?.to_vec1()?;
    let x_off = (w - tw) / 2;
    let y_off = image_h + (strip_h - th) / 2;
    for c in 0..3 {
        for yy in 0..th {
            for xx in 0..tw {
                let v = (data[c * th * tw + yy * tw + xx].clamp(0.0, 1.0) * 255.0).round() as u8;
                let px = canvas.get_pixel_mut((x_off + xx) as u32, (y_off + yy) as u32);
                px.0[c] = v;
            }
        }
    }
    BBox::new(
        x_off as i32,
        y_off as i32,
        (x_off + tw) as i32,
        (y_off + th) as i32,
    )
}

/// Builds the training in-context canvas: erases one seeded-random
/// inked character from the image (compositing the ground-truth
/// background over its box) and appends a strip below the image
/// holding that character's alpha-segmented rendering, resized
/// aspect-preserving to the strip height and centered horizontally.
pub fn build_in_context(sample: &EditSample, rng_seed: u64, strip_frac: f64) -> Result<InContext> {
    if !(strip_frac > 0.0 && strip_frac < 1.0) {
        return Err(Error::invalid(format!(
            "strip_frac must be in (0,1), got {strip_frac}"
        )));
    }
    if sample.char_boxes.len() < 2 {
        return Ok(InContext::SkippedSingleChar);
    }
    let (w, h) = (sample.image.width() as usize, sample.image.height() as usize);
    let strip_h = ((h as f64 * strip_frac).round() as usize).max(1);
    let mut rng = RngStream::new(rng_seed);
    let reference = sample.char_boxes[rng.gen_index(sample.char_boxes.len())];

    let mut canvas = RgbImage::from_pixel(w as u32, (h + strip_h) as u32, image::Rgb([STRIP_FILL; 3]));
    for (x, y, p) in sample.image.enumerate_pixels() {
        canvas.put_pixel(x, y, *p);
    }
    let rb = reference.bbox;
    for y in rb.y0..rb.y1 {
        for x in rb.x0..rb.x1 {
            canvas.put_pixel(
                x as u32,
                y as u32,
                *sample.background.get_pixel(x as u32, y as u32),
            );
        }
    }

    let ref_crop = crop_rgb(&sample.image, &rb);
    let ref_alpha = crop_gray(&sample.alpha, &rb);
    let seg = segment_by_alpha(&ref_crop, &ref_alpha);
    paste_into_strip(&mut canvas, h, strip_h, &seg)?;

    Ok(InContext::Built(InContextCanvas {
        image: canvas,
        strip_region: BBox::new(0, h as i32, w as i32, (h + strip_h) as i32)?,
        reference,
    }))
}
