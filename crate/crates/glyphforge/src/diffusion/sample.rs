//! Inference: the checkpoint-backed edit model, ancestral/strided
//! denoising over the latent, and the exact masked compositing rule
//! that keeps out-of-mask pixels bit-identical to the input.

use std::path::Path;

use candle_core::{Device, Tensor};
use image::RgbImage;

use crate::config::RunConfig;
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::train::TrainContext;
use crate::diffusion::unet::{style_query_masks, Denoiser, StyleContext};
use crate::diffusion::{grid_to_tensor, image_to_signed, mask_to_tensor, signed_to_image, LatentBundle};
use crate::encoding::tokenize_chars;
use crate::error::{Error, Result};
use crate::glyph::{render_glyph, BBox, GlyphImage, MaskImage, FONT_SANS};
use crate::perception::{load_recognizer, rgb_to_tensor};
use crate::rngutil::RngStream;
use crate::style::{grid_to_rgb_tensor, paste_into_strip, StyleAdapter, STRIP_FILL};

/// Style tokens and per-layer query masks for one sampling run.
pub struct StyleData {
    pub tokens: Tensor,
    pub masks: Vec<Tensor>,
}

/// Conditioning streams that stay fixed across denoising steps.
pub struct FixedConditioning {
    pub masked_latent: Tensor,
    pub mask_down: Tensor,
    pub glyph_latent: Tensor,
    pub cond: Tensor,
    pub style: Option<StyleData>,
}

/// Descending timestep sequence: the full schedule when
/// `steps == T` (ancestral sampling), an evenly spaced subsequence
/// from `T−1` down to `0` otherwise (deterministic).
pub fn sampler_timesteps(t_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::invalid("steps must be ≥ 1"));
    }
    if steps > t_steps {
        return Err(Error::invalid(format!(
            "{steps} sampling steps exceed the schedule length {t_steps}"
        )));
    }
    if steps == 1 {
        return Ok(vec![t_steps - 1]);
    }
    Ok((0..steps)
        .map(|i| (steps - 1 - i) * (t_steps - 1) / (steps - 1))
        .collect())
}

/// Runs the reverse process from pure noise under fixed conditioning.
/// Ancestral DDPM when `steps` equals the schedule length, strided
/// deterministic updates otherwise. Returns the predicted clean
/// latent.
pub fn run_sampler(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    fixed: &FixedConditioning,
    adapters: Option<&[StyleAdapter]>,
    steps: usize,
    seed: u64,
    device: &Device,
) -> Result<Tensor> {
    let taus = sampler_timesteps(schedule.t_steps(), steps)?;
    let ancestral = steps == schedule.t_steps();
    let (b, c, h, w) = fixed.masked_latent.dims4()?;
    let mut rng = RngStream::derive(seed, "sampler", 0);
    let mut z = rng.normal_tensor(&[b, c, h, w], device)?;

    let style_ctx = match (&fixed.style, adapters) {
        (Some(sd), Some(ad)) => Some(StyleContext {
            tokens: &sd.tokens,
            adapters: ad,
            masks: &sd.masks,
        }),
        _ => None,
    };

    for (i, &t) in taus.iter().enumerate() {
        let x_in = LatentBundle {
            noisy_latent: z.clone(),
            masked_image_latent: fixed.masked_latent.clone(),
            mask_down: fixed.mask_down.clone(),
            glyph_latent: fixed.glyph_latent.clone(),
        }
        .concat()?;
        let ts = vec![t; b];
        let out = denoiser.forward(&x_in, &ts, &fixed.cond, style_ctx.as_ref())?;
        let eps = out.eps.detach();

        let a_t = schedule.alpha_bar(t);
        let z0_hat = ((&z - (&eps * (1.0 - a_t).sqrt())?)? / a_t.sqrt())?;
        z = (match taus.get(i + 1) {
            None => z0_hat,
            Some(&t_prev) => {
                let a_p = schedule.alpha_bar(t_prev);
                if ancestral {
                    let beta_t = schedule.beta(t);
                    let alpha_t = 1.0 - beta_t;
                    let coef0 = a_p.sqrt() * beta_t / (1.0 - a_t);
                    let coef_t = alpha_t.sqrt() * (1.0 - a_p) / (1.0 - a_t);
                    let var = (1.0 - a_p) / (1.0 - a_t) * beta_t;
                    let noise = rng.normal_tensor(&[b, c, h, w], device)?;
                    (((z0_hat * coef0)? + (&z * coef_t)?)? + (noise * var.sqrt())?)?
                } else {
                    ((z0_hat * a_p.sqrt())? + (&eps * (1.0 - a_p).sqrt())?)?
                }
            }
        })
        .detach();
    }
    Ok(z)
}

/// Style source for an edit.
#[derive(Debug, Clone)]
pub enum StyleMode {
    /// No style branch; the phase-1 conditioning path only.
    Off,
    /// Preserve the edit region's current appearance: the region crop
    /// becomes the style reference and its recognized transcription
    /// the glyph counterpart.
    Preserve,
    /// An external reference image plus its transcription.
    Reference { image: RgbImage, text: String },
}

/// A trained model ready for [`sample_edit`].
pub struct EditModel {
    pub ctx: TrainContext,
    /// Training steps recorded in the loaded checkpoint.
    pub trained_steps: usize,
}

impl EditModel {
    /// Loads a denoiser checkpoint whose config and alphabet hashes
    /// must match `cfg`.
    pub fn load(checkpoint: &Path, cfg: &RunConfig, device: &Device) -> Result<Self> {
        let (store, meta) = crate::checkpoint::load_checkpoint(checkpoint, device)?;
        crate::checkpoint::check_compat(
            &meta,
            crate::diffusion::unet::DENOISER_KIND,
            Some(&cfg.content_hash()),
            &cfg.alphabet()?.hash(),
        )?;
        if meta.step == 0 {
            return Err(Error::NotTrained(format!(
                "checkpoint {} records zero training steps",
                checkpoint.display()
            )));
        }
        let ctx = TrainContext::from_store(cfg, device, store)?;
        Ok(EditModel {
            ctx,
            trained_steps: meta.step,
        })
    }

    /// Wraps an in-memory context (tests, in-training evaluation).
    pub fn from_context(ctx: TrainContext, trained_steps: usize) -> Self {
        EditModel { ctx, trained_steps }
    }

    /// Loads the recognizer needed by the style modes.
    pub fn attach_recognizer(&mut self, path: &Path) -> Result<()> {
        let (_store, rec, _meta) = load_recognizer(path, &self.ctx.cfg, &self.ctx.alphabet)?;
        self.ctx.set_recognizer(rec);
        Ok(())
    }
}

/// An edited image plus the conditioning actually used.
#[derive(Debug, Clone)]
pub struct EditOutput {
    pub image: RgbImage,
    pub region: BBox,
    pub glyph: GlyphImage,
    pub steps: usize,
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

/// Renders the glyph counterpart for a style reference: the
/// transcription in the conditioning font, over the reference's own
/// frame.
fn reference_glyph(text: &str, w: usize, h: usize) -> Result<GlyphImage> {
    render_glyph(
        text,
        &BBox::new(0, 0, w as i32, h as i32)?,
        (h, w),
        FONT_SANS,
    )
}

/// Edits `region` of `image` to read `text`.
///
/// Builds the glyph raster and token condition, optionally the
/// in-context strip canvas plus style tokens, denoises from pure
/// noise, decodes and composites exactly:
/// `output = mask ⊙ decoded + (1 − mask) ⊙ original`, then drops the
/// strip rows. Pixels outside the mask are bit-identical to the
/// input.
pub fn sample_edit(
    model: &EditModel,
    image: &RgbImage,
    region: BBox,
    text: &str,
    style: &StyleMode,
    steps: usize,
    seed: u64,
) -> Result<EditOutput> {
    let ctx = &model.ctx;
    let cfg = &ctx.cfg;
    let dev = &ctx.device;
    let (h, w) = (cfg.height, cfg.width);
    if steps == 0 {
        return Err(Error::invalid("steps must be ≥ 1"));
    }
    if model.trained_steps == 0 {
        return Err(Error::NotTrained(
            "edit model has no training steps behind it".into(),
        ));
    }
    if (image.height() as usize, image.width() as usize) != (h, w) {
        return Err(Error::invalid(format!(
            "image is {}x{}, model expects {h}x{w}",
            image.height(),
            image.width()
        )));
    }
    let region = region.clamp_to(h as i32, w as i32)?;
    let seq = tokenize_chars(text, &ctx.alphabet, cfg.k_max)?;
    let glyph = render_glyph(text, &region, (h, w), FONT_SANS)?;

    let strip_h = match style {
        StyleMode::Off => 0,
        _ => cfg.strip_height(),
    };
    let canvas_h = h + strip_h;
    let mut canvas = RgbImage::from_pixel(w as u32, canvas_h as u32, image::Rgb([STRIP_FILL; 3]));
    for (x, y, p) in image.enumerate_pixels() {
        canvas.put_pixel(x, y, *p);
    }

    let style_tokens = match style {
        StyleMode::Off => None,
        _ => {
            let parts = ctx.style.as_ref().ok_or_else(|| {
                Error::NotTrained("checkpoint carries no style branch; use style mode off".into())
            })?;
            let rec = ctx.recognizer.as_ref().ok_or_else(|| {
                Error::Config("style modes need a recognizer checkpoint".into())
            })?;
            let (ref_img, ref_text) = match style {
                StyleMode::Preserve => {
                    let crop = crop_rgb(image, &region);
                    let read = rec.recognize(&rgb_to_tensor(&crop, dev)?, &ctx.alphabet)?;
                    let read = read.trim().to_string();
                    // An unreadable region still decouples against the
                    // target text's rendering.
                    let t = if read.is_empty() { text.to_string() } else { read };
                    (crop, t)
                }
                StyleMode::Reference { image: r, text: t } => {
                    if t.trim().is_empty() {
                        return Err(Error::invalid(
                            "style reference needs a non-empty transcription",
                        ));
                    }
                    (r.clone(), t.clone())
                }
                StyleMode::Off => unreachable!(),
            };
            paste_into_strip(&mut canvas, h, strip_h, &ref_img)?;
            let g = reference_glyph(
                &ref_text,
                ref_img.width() as usize,
                ref_img.height() as usize,
            )?;
            let x_s = rgb_to_tensor(&ref_img, dev)?;
            let g_t = grid_to_rgb_tensor(&g.pixels, dev)?;
            Some(parts.extractor.decouple(rec, &x_s, &g_t)?.tokens)
        }
    };

    let mask = MaskImage::new(canvas_h, w, region)?;
    let x_signed = image_to_signed(&canvas, dev)?;
    let mask_t = mask_to_tensor(&mask, dev)?;
    let g = grid_to_tensor(&glyph.pixels, dev)?;
    let g = if strip_h > 0 {
        Tensor::cat(
            &[g, Tensor::zeros(&[1, 1, strip_h, w], candle_core::DType::F32, dev)?],
            2,
        )?
    } else {
        g
    };
    let glyph_signed = ((&g * 2.0)? - 1.0)?.expand(&[1, 3, canvas_h, w])?.contiguous()?;
    let masked_px = x_signed.broadcast_mul(&(1.0 - &mask_t)?)?;

    let masked_latent = ctx.codec.encode(&masked_px)?.detach();
    let glyph_latent = ctx.codec.encode(&glyph_signed)?.detach();
    let mask_down = mask_t.avg_pool2d(ctx.codec.factor())?.detach();
    let cond = ctx.encoder.encode_batch(&[seq])?.detach();

    let (_b, _c, lh, lw) = masked_latent.dims4()?;
    let style_data = match style_tokens {
        None => None,
        Some(tokens) => Some(StyleData {
            tokens: tokens.detach(),
            masks: style_query_masks(std::slice::from_ref(&mask), (lh, lw), dev)?,
        }),
    };

    let fixed = FixedConditioning {
        masked_latent,
        mask_down,
        glyph_latent,
        cond,
        style: style_data,
    };
    let adapters = ctx.style.as_ref().map(|p| p.adapters.as_slice());
    let z = run_sampler(&ctx.denoiser, &ctx.schedule, &fixed, adapters, steps, seed, dev)?;
    let decoded = ctx.codec.decode(&z)?;
    let dec_img = signed_to_image(&decoded)?;

    let mut out = image.clone();
    for y in region.y0..region.y1 {
        for x in region.x0..region.x1 {
            out.put_pixel(x as u32, y as u32, *dec_img.get_pixel(x as u32, y as u32));
        }
    }
    Ok(EditOutput {
        image: out,
        region,
        glyph,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_sample;
    use crate::nn::ParamStore;
    use crate::perception::Recognizer;

    fn small_cfg() -> RunConfig {
        RunConfig {
            t_steps: 12,
            ..RunConfig::default()
        }
    }

    fn scrambled_model(cfg: &RunConfig) -> EditModel {
        let ctx = TrainContext::new(cfg, &Device::Cpu).unwrap();
        ctx.store.scramble(11).unwrap();
        let schedule = NoiseSchedule::linear(cfg.t_steps, cfg.beta_start, cfg.beta_end).unwrap();
        let mut store = ctx.store;
        schedule.install(&mut store).unwrap();
        let ctx = TrainContext::from_store(cfg, &Device::Cpu, store).unwrap();
        EditModel::from_context(ctx, 100)
    }

    fn fixture() -> (RunConfig, EditModel, crate::data::EditSample) {
        let cfg = small_cfg();
        let model = scrambled_model(&cfg);
        let sample = generate_sample(31, &cfg, None).unwrap();
        (cfg, model, sample)
    }

    #[test]
    fn timesteps_cover_full_schedule_and_strides() {
        assert_eq!(sampler_timesteps(10, 10).unwrap(), (0..10).rev().collect::<Vec<_>>());
        let s = sampler_timesteps(100, 4).unwrap();
        assert_eq!(s.first(), Some(&99));
        assert_eq!(s.last(), Some(&0));
        assert!(s.windows(2).all(|p| p[0] > p[1]));
        assert_eq!(sampler_timesteps(100, 1).unwrap(), vec![99]);
    }

    #[test]
    fn zero_steps_is_rejected_with_the_contract_message() {
        let err = sampler_timesteps(100, 0).unwrap_err();
        assert!(err.to_string().contains("steps must be ≥ 1"));
        let (_cfg, model, sample) = fixture();
        let err = sample_edit(
            &model,
            &sample.image,
            sample.edit_box,
            "HI",
            &StyleMode::Off,
            0,
            7,
        )
        .unwrap_err();
        assert!(err.to_string().contains("steps must be ≥ 1"));
    }

    #[test]
    fn untrained_model_is_rejected() {
        let cfg = small_cfg();
        let ctx = TrainContext::new(&cfg, &Device::Cpu).unwrap();
        let model = EditModel::from_context(ctx, 0);
        let sample = generate_sample(31, &cfg, None).unwrap();
        let err = sample_edit(
            &model,
            &sample.image,
            sample.edit_box,
            "HI",
            &StyleMode::Off,
            4,
            7,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotTrained(_)), "got {err}");
    }

    #[test]
    fn out_of_mask_pixels_are_bit_identical() {
        let (_cfg, model, sample) = fixture();
        let out = sample_edit(
            &model,
            &sample.image,
            sample.edit_box,
            "NEW",
            &StyleMode::Off,
            3,
            7,
        )
        .unwrap();
        assert_eq!(out.image.dimensions(), sample.image.dimensions());
        let r = out.region;
        for (x, y, p) in out.image.enumerate_pixels() {
            if !r.contains_point(x as i32, y as i32) {
                assert_eq!(p, sample.image.get_pixel(x, y), "pixel ({x},{y}) changed");
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_edit_bitwise() {
        let (_cfg, model, sample) = fixture();
        let run = || {
            sample_edit(
                &model,
                &sample.image,
                sample.edit_box,
                "AB 7",
                &StyleMode::Off,
                5,
                99,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.image.as_raw(), b.image.as_raw());
        let c = sample_edit(
            &model,
            &sample.image,
            sample.edit_box,
            "AB 7",
            &StyleMode::Off,
            5,
            100,
        )
        .unwrap();
        assert_ne!(a.image.as_raw(), c.image.as_raw(), "seed had no effect");
    }

    #[test]
    fn full_schedule_uses_ancestral_noise_and_differs_from_strided() {
        let (cfg, model, sample) = fixture();
        let full = sample_edit(
            &model,
            &sample.image,
            sample.edit_box,
            "GO",
            &StyleMode::Off,
            cfg.t_steps,
            5,
        )
        .unwrap();
        let strided = sample_edit(
            &model,
            &sample.image,
            sample.edit_box,
            "GO",
            &StyleMode::Off,
            cfg.t_steps / 2,
            5,
        )
        .unwrap();
        assert_ne!(full.image.as_raw(), strided.image.as_raw());
    }

    #[test]
    fn style_preserve_mode_builds_tokens_and_keeps_exactness() {
        let cfg = small_cfg();
        let ctx = TrainContext::new(&cfg, &Device::Cpu).unwrap();
        ctx.store.scramble(13).unwrap();
        let schedule = NoiseSchedule::linear(cfg.t_steps, cfg.beta_start, cfg.beta_end).unwrap();
        let mut store = ctx.store;
        schedule.install(&mut store).unwrap();
        let mut ctx = TrainContext::from_store(&cfg, &Device::Cpu, store).unwrap();
        let mut rec_store = ParamStore::new(Device::Cpu);
        let rec =
            Recognizer::new(&mut rec_store, &cfg, cfg.alphabet().unwrap().vocab_size()).unwrap();
        ctx.set_recognizer(rec);
        ctx.enable_style().unwrap();
        let model = EditModel::from_context(ctx, 50);
        let sample = generate_sample(33, &cfg, None).unwrap();
        let out = sample_edit(
            &model,
            &sample.image,
            sample.edit_box,
            "XY",
            &StyleMode::Preserve,
            3,
            21,
        )
        .unwrap();
        assert_eq!(out.image.dimensions(), sample.image.dimensions());
        for (x, y, p) in out.image.enumerate_pixels() {
            if !out.region.contains_point(x as i32, y as i32) {
                assert_eq!(p, sample.image.get_pixel(x, y));
            }
        }
        // Reference mode with an external image behaves the same way.
        let ref_img = crop_rgb(&sample.image, &sample.edit_box);
        let out2 = sample_edit(
            &model,
            &sample.image,
            sample.edit_box,
            "XY",
            &StyleMode::Reference {
                image: ref_img,
                text: sample.text.clone(),
            },
            3,
            21,
        )
        .unwrap();
        assert_eq!(out2.image.dimensions(), sample.image.dimensions());
    }

    #[test]
    fn style_mode_without_style_branch_is_rejected() {
        let (_cfg, model, sample) = fixture();
        let err = sample_edit(
            &model,
            &sample.image,
            sample.edit_box,
            "HI",
            &StyleMode::Preserve,
            3,
            7,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotTrained(_)), "got {err}");
    }

    #[test]
    fn overlong_text_is_rejected() {
        let (cfg, model, sample) = fixture();
        let long = "A".repeat(cfg.k_max + 1);
        let err = sample_edit(
            &model,
            &sample.image,
            sample.edit_box,
            &long,
            &StyleMode::Off,
            3,
            7,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)), "got {err}");
    }
}
