//! Training: batch preparation from edit samples, the three-term
//! training step (noise + perceptual + layout) and the two-phase loop
//! with checkpoints, a JSON-lines metrics log and periodic evaluation.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::checkpoint::{
    check_compat, load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_SCHEMA,
};
use crate::config::RunConfig;
use crate::data::{align_char_boxes, load_manifest, load_sample, EditSample};
use crate::diffusion::codec::Codec;
use crate::diffusion::sample::{run_sampler, FixedConditioning};
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::unet::{style_query_masks, AttnCapture, Denoiser, StyleContext, DENOISER_KIND};
use crate::diffusion::{grid_to_tensor, image_to_signed, mask_to_tensor, signed_to_image, LatentBundle};
use crate::encoding::{tokenize_chars, Alphabet, TextEncoder};
use crate::error::{Error, Result};
use crate::eval::ned;
use crate::glyph::{BBox, MaskImage};
use crate::layout::{ciou_loss_term, layer_score, soft_box_tensor, TokenMaps};
use crate::nn::ParamStore;
use crate::perception::{crop_box, estimate_x0_latent, load_recognizer, perceptual_loss, Recognizer};
use crate::rngutil::{derive_seed, RngStream};
use crate::style::{build_in_context, grid_to_rgb_tensor, sample_style_crop, InContext, StyleAdapter, StyleExtractor, STRIP_FILL};

/// Training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Phase1,
    Phase2Adapter,
    Phase2Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Phase1 => "phase1",
            Phase::Phase2Adapter => "phase2_adapter",
            Phase::Phase2Joint => "phase2_joint",
        }
    }

    fn of_step(step: usize, cfg: &RunConfig) -> Phase {
        if step < cfg.steps_phase1 {
            Phase::Phase1
        } else if step < cfg.steps_phase1 + cfg.steps_phase2_adapter {
            Phase::Phase2Adapter
        } else {
            Phase::Phase2Joint
        }
    }

    fn lr(self, cfg: &RunConfig) -> f64 {
        match self {
            Phase::Phase1 => cfg.lr_phase1,
            _ => cfg.lr_phase2,
        }
    }
}

/// The style-branch parameters created in phase 2.
pub struct StyleParts {
    pub extractor: StyleExtractor,
    pub adapters: Vec<StyleAdapter>,
}

/// Everything a training step needs: parameters, models, schedule and
/// the frozen layout-layer selection once it exists.
pub struct TrainContext {
    pub cfg: RunConfig,
    pub device: Device,
    pub alphabet: Alphabet,
    pub store: ParamStore,
    pub denoiser: Denoiser,
    pub encoder: TextEncoder,
    pub codec: Codec,
    pub schedule: NoiseSchedule,
    pub recognizer: Option<Recognizer>,
    pub style: Option<StyleParts>,
    pub frozen_layers: Option<Vec<usize>>,
}

impl TrainContext {
    /// Fresh parameters for `cfg`; `store` may instead come from a
    /// checkpoint via [`TrainContext::from_store`].
    pub fn new(cfg: &RunConfig, device: &Device) -> Result<Self> {
        Self::from_store(cfg, device, ParamStore::new(device.clone()))
    }

    /// Builds models over an existing parameter store (checkpoint
    /// restore adopts stored tensors; missing ones are created).
    pub fn from_store(cfg: &RunConfig, device: &Device, mut store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let alphabet = cfg.alphabet()?;
        let codec = Codec::from_config(&mut store, cfg)?;
        let in_ch = LatentBundle::channels(codec.latent_channels());
        let denoiser = Denoiser::new(&mut store, cfg, in_ch, codec.latent_channels())?;
        let mut rng = RngStream::derive(cfg.seed, "text-encoder-init", 0);
        let encoder = TextEncoder::new(&mut store, &mut rng, &alphabet, cfg.k_max, cfg.d_model)?;
        let schedule = if store.contains(crate::diffusion::schedule::SCHEDULE_PARAM) {
            NoiseSchedule::from_store(&store)?
        } else {
            let s = NoiseSchedule::linear(cfg.t_steps, cfg.beta_start, cfg.beta_end)?;
            s.install(&mut store)?;
            s
        };
        let mut ctx = TrainContext {
            cfg: cfg.clone(),
            device: device.clone(),
            alphabet,
            store,
            denoiser,
            encoder,
            codec,
            schedule,
            recognizer: None,
            style: None,
            frozen_layers: None,
        };
        // A checkpoint saved in phase 2 already holds style parameters;
        // adopt them so resumed runs keep training the same tensors.
        if ctx.store.contains("style.proj.weight") {
            ctx.enable_style()?;
        }
        Ok(ctx)
    }

    pub fn set_recognizer(&mut self, recognizer: Recognizer) {
        self.recognizer = Some(recognizer);
    }

    /// Creates (or adopts) the style extractor and the per-layer
    /// adapters. Requires the recognizer only at feature time, not
    /// here.
    pub fn enable_style(&mut self) -> Result<()> {
        if self.style.is_some() {
            return Ok(());
        }
        let feat_dim = crate::perception::FEATURE_DIM;
        let extractor = StyleExtractor::new(&mut self.store, &self.cfg, feat_dim)?;
        let ch = &self.cfg.unet_channels;
        let widths = [ch[0], ch[1], ch[2], ch[1], ch[0]];
        let mut rng = RngStream::derive(self.cfg.seed, "style-adapter-init", 0);
        let mut adapters = Vec::with_capacity(widths.len());
        for (i, &c) in widths.iter().enumerate() {
            adapters.push(StyleAdapter::new(
                &mut self.store,
                &mut rng,
                &format!("style_adapter.l{i}"),
                self.cfg.style_dim,
                c,
                self.cfg.unet_heads,
            )?);
        }
        self.style = Some(StyleParts {
            extractor,
            adapters,
        });
        Ok(())
    }

    /// Variables the optimizer updates in `phase`. The stored schedule
    /// is never trainable.
    pub fn trainable_vars(&self, phase: Phase) -> Vec<Var> {
        self.store.vars_matching(|n| {
            if n.starts_with("schedule.") || n.starts_with("codec.") {
                return false;
            }
            let is_style = n.starts_with("style");
            match phase {
                Phase::Phase1 => !is_style,
                Phase::Phase2Adapter => is_style,
                Phase::Phase2Joint => true,
            }
        })
    }

    pub fn optimizer(&self, phase: Phase) -> Result<AdamW> {
        let vars = self.trainable_vars(phase);
        if vars.is_empty() {
            return Err(Error::Training(format!(
                "no trainable parameters in {}",
                phase.name()
            )));
        }
        Ok(AdamW::new(
            vars,
            ParamsAdamW {
                lr: phase.lr(&self.cfg),
                ..Default::default()
            },
        )?)
    }
}

/// One batch with every conditioning stream prepared.
pub struct PreparedBatch {
    pub ids: Vec<String>,
    pub texts: Vec<String>,
    /// Clean canvas pixels, `[B, 3, Hc, W]` signed.
    pub clean: Tensor,
    pub z0: Tensor,
    pub masked_latent: Tensor,
    pub mask_down: Tensor,
    pub glyph_latent: Tensor,
    pub cond: Tensor,
    /// Perceptual crop per sample, canvas pixel coordinates.
    pub crop_boxes: Vec<BBox>,
    /// Per sample, per real token: the matching character box (spaces
    /// carry none).
    pub gt_boxes: Vec<Vec<Option<BBox>>>,
    /// Canvas-size masks (strip rows, if any, are zero).
    pub masks: Vec<MaskImage>,
    pub style_tokens: Option<Tensor>,
}

fn extend_canvas(img: &image::RgbImage, strip_h: usize) -> image::RgbImage {
    let (w, h) = (img.width(), img.height());
    let mut canvas = image::RgbImage::from_pixel(w, h + strip_h as u32, image::Rgb([STRIP_FILL; 3]));
    for (x, y, p) in img.enumerate_pixels() {
        canvas.put_pixel(x, y, *p);
    }
    canvas
}

/// Assembles tensors for a batch. With `with_style` set, samples get
/// in-context canvases (strip below the image) and style tokens;
/// single-character samples keep a plain gray strip and zero tokens.
pub fn prepare_batch(
    ctx: &TrainContext,
    samples: &[&EditSample],
    with_style: bool,
    seed: u64,
) -> Result<PreparedBatch> {
    if samples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let cfg = &ctx.cfg;
    let dev = &ctx.device;
    let (h, w) = (cfg.height, cfg.width);
    let strip_h = if with_style { cfg.strip_height() } else { 0 };
    let canvas_h = h + strip_h;
    let strip_frac = strip_h as f64 / h as f64;

    let mut ids = Vec::new();
    let mut texts = Vec::new();
    let mut clean_rows = Vec::new();
    let mut mask_rows = Vec::new();
    let mut glyph_rows = Vec::new();
    let mut crop_boxes = Vec::new();
    let mut gt_boxes = Vec::new();
    let mut masks = Vec::new();
    let mut token_rows = Vec::new();

    for (i, s) in samples.iter().enumerate() {
        if (s.image.height() as usize, s.image.width() as usize) != (h, w) {
            return Err(Error::invalid(format!(
                "sample {} is {}x{}, config wants {h}x{w}",
                s.sample_id,
                s.image.height(),
                s.image.width()
            )));
        }
        let (canvas, built) = if with_style {
            match build_in_context(s, derive_seed(seed, "in-context", i as u64), strip_frac)? {
                InContext::Built(c) => (c.image, true),
                InContext::SkippedSingleChar => (extend_canvas(&s.image, strip_h), false),
            }
        } else {
            (s.image.clone(), false)
        };
        let mask = MaskImage::new(canvas_h, w, s.mask.region)?;

        clean_rows.push(image_to_signed(&canvas, dev)?);
        mask_rows.push(mask_to_tensor(&mask, dev)?);
        let g = grid_to_tensor(&s.glyph.pixels, dev)?;
        let g = if strip_h > 0 {
            Tensor::cat(
                &[g, Tensor::zeros(&[1, 1, strip_h, w], candle_core::DType::F32, dev)?],
                2,
            )?
        } else {
            g
        };
        glyph_rows.push(g);

        if let Some(parts) = (with_style).then_some(ctx.style.as_ref()).flatten() {
            let rec = ctx.recognizer.as_ref().ok_or_else(|| {
                Error::Config("style training requires a recognizer for feature extraction".into())
            })?;
            if built {
                let pair = sample_style_crop(s, derive_seed(seed, "style-crop", i as u64))?;
                let x_s = crate::perception::rgb_to_tensor(&pair.segmented, dev)?;
                let glyph_crop = grid_to_rgb_tensor(&pair.glyph_crop, dev)?;
                token_rows.push(parts.extractor.decouple(rec, &x_s, &glyph_crop)?.tokens);
            } else {
                token_rows.push(Tensor::zeros(
                    &[1, cfg.style_tokens, cfg.style_dim],
                    candle_core::DType::F32,
                    dev,
                )?);
            }
        }

        ids.push(s.sample_id.clone());
        texts.push(s.text.clone());
        crop_boxes.push(s.edit_box);
        gt_boxes.push(align_char_boxes(&s.text, &s.char_boxes)?);
        masks.push(mask);
    }

    let clean = Tensor::cat(&clean_rows, 0)?;
    let mask_t = Tensor::cat(&mask_rows, 0)?;
    let glyph = Tensor::cat(&glyph_rows, 0)?;
    let glyph_signed = ((&glyph * 2.0)? - 1.0)?
        .expand(&[samples.len(), 3, canvas_h, w])?
        .contiguous()?;
    let masked_px = clean.broadcast_mul(&(1.0 - &mask_t)?)?;

    let z0 = ctx.codec.encode(&clean)?.detach();
    let masked_latent = ctx.codec.encode(&masked_px)?.detach();
    let glyph_latent = ctx.codec.encode(&glyph_signed)?.detach();
    let mask_down = mask_t.avg_pool2d(ctx.codec.factor())?.detach();

    let seqs = texts
        .iter()
        .map(|t| tokenize_chars(t, &ctx.alphabet, cfg.k_max))
        .collect::<Result<Vec<_>>>()?;
    let cond = ctx.encoder.encode_batch(&seqs)?;

    let style_tokens = if token_rows.is_empty() {
        None
    } else {
        Some(Tensor::cat(&token_rows, 0)?)
    };

    Ok(PreparedBatch {
        ids,
        texts,
        clean,
        z0,
        masked_latent,
        mask_down,
        glyph_latent,
        cond,
        crop_boxes,
        gt_boxes,
        masks,
        style_tokens,
    })
}

/// The four scalars a training step reports.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossReport {
    pub l_noise: f64,
    pub l_p: f64,
    pub l_iou: f64,
    pub total: f64,
}

/// Extracts sample `b`'s first `n_real` token maps from a capture as
/// plain grids.
pub fn token_maps_for_sample(cap: &AttnCapture, b: usize, n_real: usize) -> Result<TokenMaps> {
    let mut maps = Vec::with_capacity(n_real);
    let probs = cap.probs.narrow(0, b, 1)?;
    for k in 0..n_real {
        let col: Vec<f32> = probs
            .narrow(2, k, 1)?
            .flatten_all()?
            .to_vec1()?;
        let mut g = crate::grid::Grid::zeros(cap.w, cap.h);
        for y in 0..cap.h {
            for x in 0..cap.w {
                g.set(x, y, col[y * cap.w + x]);
            }
        }
        maps.push(g);
    }
    Ok(TokenMaps {
        layer_id: cap.layer_id,
        maps,
    })
}

/// Scores every captured layer against the batch's ground-truth boxes
/// (mean region IoU over samples) and returns the best `k` layer ids.
pub fn select_layers_for_batch(
    captures: &[AttnCapture],
    batch: &PreparedBatch,
    cfg: &RunConfig,
    model_hw: (usize, usize),
) -> Result<Vec<usize>> {
    let params = cfg.layout_params();
    let mut scored: Vec<(f64, usize)> = Vec::new();
    for cap in captures {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (b, gts) in batch.gt_boxes.iter().enumerate() {
            let maps = token_maps_for_sample(cap, b, gts.len())?;
            let mut fm = Vec::new();
            let mut fg = Vec::new();
            for (k, gt) in gts.iter().enumerate() {
                if let Some(g) = gt {
                    fm.push(maps.maps[k].clone());
                    fg.push(*g);
                }
            }
            if fg.is_empty() {
                continue;
            }
            sum += layer_score(
                &TokenMaps {
                    layer_id: cap.layer_id,
                    maps: fm,
                },
                &fg,
                &params,
                model_hw,
            );
            n += 1;
        }
        if n > 0 {
            scored.push((sum / n as f64, cap.layer_id));
        }
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(scored
        .into_iter()
        .take(cfg.top_k_layers)
        .map(|(_, id)| id)
        .collect())
}

/// Forward pass and loss assembly. `inject_eps_pred` replaces the
/// denoiser output (oracle tests). Returns the differentiable total
/// and the scalar report.
pub fn step_losses(
    ctx: &TrainContext,
    batch: &PreparedBatch,
    step: usize,
    inject_eps_pred: Option<&Tensor>,
) -> Result<(Tensor, LossReport)> {
    let cfg = &ctx.cfg;
    let dev = &ctx.device;
    let (bsz, c, lh, lw) = batch.z0.dims4()?;
    let mut rng = RngStream::derive(cfg.seed, "train-noise", step as u64);
    let ts: Vec<usize> = (0..bsz).map(|_| rng.gen_index(cfg.t_steps)).collect();
    let eps = NoiseSchedule::draw_training_noise(&mut rng, &[bsz, c, lh, lw], cfg.noise_offset, dev)?;
    let z_t = ctx.schedule.add_noise_batch(&batch.z0, &eps, &ts)?;
    let x_in = LatentBundle {
        noisy_latent: z_t.clone(),
        masked_image_latent: batch.masked_latent.clone(),
        mask_down: batch.mask_down.clone(),
        glyph_latent: batch.glyph_latent.clone(),
    }
    .concat()?;

    let level_masks;
    let style_ctx = match (&ctx.style, &batch.style_tokens) {
        (Some(parts), Some(tokens)) => {
            level_masks = style_query_masks(&batch.masks, (lh, lw), dev)?;
            Some(StyleContext {
                tokens,
                adapters: &parts.adapters,
                masks: &level_masks,
            })
        }
        _ => None,
    };
    let out = ctx.denoiser.forward(&x_in, &ts, &batch.cond, style_ctx.as_ref())?;
    let eps_pred = match inject_eps_pred {
        Some(t) => t.clone(),
        None => out.eps.clone(),
    };

    let l_noise = (&eps_pred - &eps)?.sqr()?.mean_all()?;
    let mut total = l_noise.clone();
    let l_noise_v = l_noise.to_scalar::<f32>()? as f64;

    let mut l_p_v = 0.0;
    if cfg.beta_perceptual != 0.0 {
        let rec = ctx.recognizer.as_ref().ok_or_else(|| {
            Error::Config(
                "perceptual loss requires a recognizer (set beta_perceptual = 0 to train without)"
                    .into(),
            )
        })?;
        let mut acc: Option<Tensor> = None;
        for i in 0..bsz {
            let z0_hat = estimate_x0_latent(
                &z_t.narrow(0, i, 1)?,
                &eps_pred.narrow(0, i, 1)?,
                ctx.schedule.alpha_bar(ts[i]),
            )?;
            let x_hat = ctx.codec.decode(&z0_hat)?;
            let x_hat_unit = ((&x_hat + 1.0)? * 0.5)?;
            let x_unit = ((&batch.clean.narrow(0, i, 1)? + 1.0)? * 0.5)?;
            let crop = &batch.crop_boxes[i];
            let parts = perceptual_loss(
                &crop_box(&x_unit, crop)?,
                &crop_box(&x_hat_unit, crop)?,
                rec,
            )?;
            acc = Some(match acc {
                None => parts.total,
                Some(a) => (a + parts.total)?,
            });
        }
        let l_p = (acc.expect("non-empty batch") / bsz as f64)?;
        l_p_v = l_p.to_scalar::<f32>()? as f64;
        total = (total + (l_p * cfg.beta_perceptual)?)?;
    }

    let mut l_iou_v = 0.0;
    if cfg.gamma_layout != 0.0 {
        let (_cb, _cc, ph, pw) = batch.clean.dims4()?;
        let model_hw = (ph, pw);
        let selected = match &ctx.frozen_layers {
            Some(ids) => ids.clone(),
            None => select_layers_for_batch(&out.captures, batch, cfg, model_hw)?,
        };
        let mut acc: Option<Tensor> = None;
        let mut n_pairs = 0usize;
        for cap in &out.captures {
            if !selected.contains(&cap.layer_id) {
                continue;
            }
            for (b, gts) in batch.gt_boxes.iter().enumerate() {
                for (k, gt) in gts.iter().enumerate() {
                    let Some(gt) = gt else { continue };
                    let map = cap
                        .probs
                        .narrow(0, b, 1)?
                        .narrow(2, k, 1)?
                        .reshape((cap.h, cap.w))?;
                    let soft = soft_box_tensor(&map, model_hw)?;
                    let (term, _val) = ciou_loss_term(&soft, gt)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => (a + term)?,
                    });
                    n_pairs += 1;
                }
            }
        }
        if let Some(a) = acc {
            let l_iou = (a / n_pairs as f64)?;
            l_iou_v = l_iou.to_scalar::<f32>()? as f64;
            total = (total + (l_iou * cfg.gamma_layout)?)?;
        }
    }

    let total_v = total.to_scalar::<f32>()? as f64;
    Ok((
        total,
        LossReport {
            l_noise: l_noise_v,
            l_p: l_p_v,
            l_iou: l_iou_v,
            total: total_v,
        },
    ))
}

/// One optimizer update. Aborts (without updating) on a non-finite
/// loss, naming the offending samples.
pub fn training_step(
    ctx: &TrainContext,
    batch: &PreparedBatch,
    step: usize,
    opt: &mut AdamW,
) -> Result<LossReport> {
    let (total, report) = step_losses(ctx, batch, step, None)?;
    if !report.total.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss {} at step {step} (samples {:?})",
            report.total, batch.ids
        )));
    }
    opt.backward_step(&total)?;
    Ok(report)
}

/// Paths and switches for [`train`].
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub corpus_dir: PathBuf,
    pub run_dir: PathBuf,
    pub recognizer_checkpoint: Option<PathBuf>,
    /// Pretrained autoencoder weights, adopted (and kept frozen) when
    /// the config selects the trained codec.
    pub codec_checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Caps the total number of steps (smoke runs); `None` runs the
    /// full configured schedule.
    pub max_steps: Option<usize>,
    /// Denoising steps used by the periodic in-training evaluation.
    pub eval_steps: usize,
    /// Samples evaluated per periodic evaluation.
    pub eval_samples: usize,
}

impl TrainOptions {
    pub fn new(corpus_dir: impl Into<PathBuf>, run_dir: impl Into<PathBuf>) -> Self {
        TrainOptions {
            corpus_dir: corpus_dir.into(),
            run_dir: run_dir.into(),
            recognizer_checkpoint: None,
            codec_checkpoint: None,
            resume: None,
            max_steps: None,
            eval_steps: 10,
            eval_samples: 8,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub last: LossReport,
}

struct SampleCache {
    dir: PathBuf,
    cache: HashMap<String, EditSample>,
}

impl SampleCache {
    fn get(&mut self, id: &str) -> Result<&EditSample> {
        if !self.cache.contains_key(id) {
            let s = load_sample(&self.dir.join(id))?;
            self.cache.insert(id.to_string(), s);
        }
        Ok(&self.cache[id])
    }
}

fn append_jsonl(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{value}")?;
    Ok(())
}

fn save_denoiser_checkpoint(
    ctx: &TrainContext,
    path: &Path,
    step: usize,
    phase: &str,
) -> Result<()> {
    let meta = CheckpointMeta {
        kind: DENOISER_KIND.to_string(),
        config_hash: ctx.cfg.content_hash(),
        alphabet_hash: ctx.alphabet.hash(),
        step,
        phase: phase.to_string(),
        schema_version: CHECKPOINT_SCHEMA,
    };
    save_checkpoint(path, &ctx.store, &meta)
}

/// Quick recognition metrics on a validation slice: runs the sampler
/// on each sample's own text and scores the recognizer's reading of
/// the edited region.
fn eval_slice(
    ctx: &TrainContext,
    cache: &mut SampleCache,
    ids: &[String],
    opts: &TrainOptions,
) -> Result<(f64, f64)> {
    let rec = ctx
        .recognizer
        .as_ref()
        .ok_or_else(|| Error::Config("evaluation requires a recognizer".into()))?;
    let mut acc = 0.0;
    let mut ned_sum = 0.0;
    let n = ids.len().min(opts.eval_samples).max(1);
    for id in ids.iter().take(n) {
        let s = cache.get(id)?.clone();
        let batch = prepare_batch(ctx, &[&s], false, derive_seed(ctx.cfg.seed, "eval-prep", 0))?;
        let fixed = FixedConditioning {
            masked_latent: batch.masked_latent.clone(),
            mask_down: batch.mask_down.clone(),
            glyph_latent: batch.glyph_latent.clone(),
            cond: batch.cond.clone(),
            style: None,
        };
        let z = run_sampler(
            &ctx.denoiser,
            &ctx.schedule,
            &fixed,
            None,
            opts.eval_steps,
            derive_seed(ctx.cfg.seed, "eval-sample", 17),
            &ctx.device,
        )?;
        let decoded = ctx.codec.decode(&z)?;
        let img = signed_to_image(&decoded)?;
        // Out-of-mask pixels come from the clean sample; only the
        // region matters for recognition.
        let region = crate::perception::rgb_to_tensor(&img, &ctx.device)?;
        let crop = crop_box(&region, &s.edit_box)?;
        let read = rec.recognize(&crop, &ctx.alphabet)?;
        let truth = s.text.trim().to_string();
        let got = read.trim().to_string();
        if got == truth {
            acc += 1.0;
        }
        ned_sum += ned(&truth, &got);
    }
    Ok((acc / n as f64, ned_sum / n as f64))
}

/// Copies `codec.*` tensors from `opts.codec_checkpoint` into the
/// store so [`TrainContext::from_store`] adopts them instead of
/// initializing fresh ones. Training never updates them (see
/// [`TrainContext::trainable_vars`]).
fn adopt_codec_params(
    store: &mut ParamStore,
    opts: &TrainOptions,
    cfg: &RunConfig,
    device: &Device,
) -> Result<()> {
    let Some(path) = &opts.codec_checkpoint else {
        return Ok(());
    };
    if cfg.codec != crate::config::CodecKind::Trained {
        return Err(Error::Config(
            "codec checkpoint given but the config selects the identity codec".into(),
        ));
    }
    let (codec_store, meta) = load_checkpoint(path, device)?;
    check_compat(
        &meta,
        crate::diffusion::CODEC_KIND,
        Some(&cfg.content_hash()),
        &cfg.alphabet()?.hash(),
    )?;
    for name in codec_store.names() {
        if name.starts_with("codec.") {
            let t = codec_store.get(&name).expect("listed name");
            store.insert_raw(&name, &t)?;
        }
    }
    Ok(())
}

/// Two-phase training over a generated corpus. Phase 1 trains the
/// denoiser and text encoder; phase 2 first trains only the style
/// branch (denoiser frozen), then fine-tunes jointly.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let device = Device::Cpu;
    let manifest = load_manifest(&opts.corpus_dir)?;
    if manifest.config_hash != cfg.content_hash() {
        return Err(Error::Config(format!(
            "corpus at {} was generated under config {}, run uses {}",
            opts.corpus_dir.display(),
            &manifest.config_hash[..12],
            &cfg.short_hash()
        )));
    }
    let ids = manifest.sample_ids.clone();
    if ids.len() < 2 {
        return Err(Error::invalid(format!(
            "corpus has {} samples; need at least 2",
            ids.len()
        )));
    }
    let n_val = (ids.len() / 10).clamp(1, 32);
    let (train_ids, val_ids) = ids.split_at(ids.len() - n_val);
    let train_ids = train_ids.to_vec();
    let val_ids = val_ids.to_vec();

    fs::create_dir_all(opts.run_dir.join("checkpoints"))?;
    let metrics_path = opts.run_dir.join("metrics.jsonl");

    let (mut ctx, start_step) = match &opts.resume {
        None => {
            let mut store = ParamStore::new(device.clone());
            adopt_codec_params(&mut store, opts, cfg, &device)?;
            (TrainContext::from_store(cfg, &device, store)?, 0)
        }
        Some(path) => {
            let (mut store, meta) = load_checkpoint(path, &device)?;
            check_compat(
                &meta,
                DENOISER_KIND,
                Some(&cfg.content_hash()),
                &cfg.alphabet()?.hash(),
            )?;
            adopt_codec_params(&mut store, opts, cfg, &device)?;
            (TrainContext::from_store(cfg, &device, store)?, meta.step)
        }
    };

    if let Some(path) = &opts.recognizer_checkpoint {
        let (_rec_store, rec, _meta) = load_recognizer(path, cfg, &ctx.alphabet)?;
        ctx.set_recognizer(rec);
    }
    if cfg.beta_perceptual != 0.0 && ctx.recognizer.is_none() {
        return Err(Error::Config(
            "beta_perceptual > 0 needs --recognizer (or set beta_perceptual = 0)".into(),
        ));
    }

    let schedule_total = cfg.steps_phase1 + cfg.steps_phase2_adapter + cfg.steps_phase2_joint;
    let total_steps = opts.max_steps.unwrap_or(schedule_total).min(schedule_total);
    if start_step >= total_steps {
        return Err(Error::invalid(format!(
            "resume step {start_step} is already past the requested {total_steps} steps"
        )));
    }

    let mut cache = SampleCache {
        dir: opts.corpus_dir.clone(),
        cache: HashMap::new(),
    };
    let mut phase = Phase::of_step(start_step, cfg);
    if phase != Phase::Phase1 {
        if ctx.recognizer.is_none() {
            return Err(Error::Config("phase 2 requires a recognizer".into()));
        }
        ctx.enable_style()?;
    }
    let mut opt = ctx.optimizer(phase)?;
    let mut last = LossReport {
        l_noise: f64::NAN,
        l_p: 0.0,
        l_iou: 0.0,
        total: f64::NAN,
    };

    for step in start_step..total_steps {
        let new_phase = Phase::of_step(step, cfg);
        if new_phase != phase {
            phase = new_phase;
            if phase != Phase::Phase1 {
                if ctx.recognizer.is_none() {
                    return Err(Error::Config("phase 2 requires a recognizer".into()));
                }
                ctx.enable_style()?;
            }
            opt = ctx.optimizer(phase)?;
        }

        let mut rng = RngStream::derive(cfg.seed, "train-data", step as u64);
        let mut samples = Vec::with_capacity(cfg.batch_size);
        let mut picked = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            picked.push(train_ids[rng.gen_index(train_ids.len())].clone());
        }
        for id in &picked {
            samples.push(cache.get(id)?.clone());
        }
        let refs: Vec<&EditSample> = samples.iter().collect();
        let with_style = phase != Phase::Phase1;
        let batch = prepare_batch(&ctx, &refs, with_style, derive_seed(cfg.seed, "batch", step as u64))?;

        if ctx.frozen_layers.is_none() && cfg.gamma_layout != 0.0 && step >= cfg.layer_select_step
        {
            let (_t, _r) = step_losses(&ctx, &batch, step, None)?;
            // Re-run just to capture maps for the freeze decision.
            let mut rng2 = RngStream::derive(cfg.seed, "train-noise", step as u64);
            let ts: Vec<usize> = (0..batch.ids.len())
                .map(|_| rng2.gen_index(cfg.t_steps))
                .collect();
            let (b, c, lh, lw) = batch.z0.dims4()?;
            let eps =
                NoiseSchedule::draw_training_noise(&mut rng2, &[b, c, lh, lw], cfg.noise_offset, &device)?;
            let z_t = ctx.schedule.add_noise_batch(&batch.z0, &eps, &ts)?;
            let x_in = LatentBundle {
                noisy_latent: z_t,
                masked_image_latent: batch.masked_latent.clone(),
                mask_down: batch.mask_down.clone(),
                glyph_latent: batch.glyph_latent.clone(),
            }
            .concat()?;
            let out = ctx.denoiser.forward(&x_in, &ts, &batch.cond, None)?;
            let (_pb, _pc, ph, pw) = batch.clean.dims4()?;
            let ids = select_layers_for_batch(&out.captures, &batch, cfg, (ph, pw))?;
            append_jsonl(
                &metrics_path,
                &serde_json::json!({"step": step, "event": "layout_layers_frozen", "layers": ids}),
            )?;
            ctx.frozen_layers = Some(ids);
        }

        last = training_step(&ctx, &batch, step, &mut opt)?;
        append_jsonl(
            &metrics_path,
            &serde_json::json!({
                "step": step,
                "phase": phase.name(),
                "l_noise": last.l_noise,
                "l_p": last.l_p,
                "l_iou": last.l_iou,
                "total": last.total,
            }),
        )?;

        let done = step + 1;
        if done % cfg.checkpoint_every == 0 && done < total_steps {
            let path = opts
                .run_dir
                .join("checkpoints")
                .join(format!("step_{done:06}.safetensors"));
            save_denoiser_checkpoint(&ctx, &path, done, phase.name())?;
        }
        if done % cfg.eval_every == 0 && ctx.recognizer.is_some() {
            let (acc, nedm) = eval_slice(&ctx, &mut cache, &val_ids, opts)?;
            append_jsonl(
                &metrics_path,
                &serde_json::json!({"step": step, "eval_acc": acc, "eval_ned": nedm}),
            )?;
        }
    }

    let final_path = opts.run_dir.join("checkpoints").join("final.safetensors");
    let phase_name = if total_steps == schedule_total {
        "final".to_string()
    } else {
        phase.name().to_string()
    };
    save_denoiser_checkpoint(&ctx, &final_path, total_steps, &phase_name)?;
    Ok(TrainSummary {
        steps: total_steps,
        final_checkpoint: final_path,
        metrics_path,
        last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_sample;

    fn small_cfg() -> RunConfig {
        RunConfig {
            batch_size: 2,
            t_steps: 20,
            beta_perceptual: 0.1,
            gamma_layout: 0.05,
            layer_select_step: 2,
            ..RunConfig::default()
        }
    }

    fn ctx_with_recognizer(cfg: &RunConfig) -> TrainContext {
        let mut ctx = TrainContext::new(cfg, &Device::Cpu).unwrap();
        let mut rec_store = ParamStore::new(Device::Cpu);
        let rec = Recognizer::new(&mut rec_store, cfg, cfg.alphabet().unwrap().vocab_size()).unwrap();
        ctx.set_recognizer(rec);
        ctx
    }

    fn two_samples(cfg: &RunConfig) -> Vec<EditSample> {
        vec![
            generate_sample(11, cfg, None).unwrap(),
            generate_sample(12, cfg, None).unwrap(),
        ]
    }

    #[test]
    fn report_total_is_the_weighted_component_sum() {
        let cfg = small_cfg();
        let ctx = ctx_with_recognizer(&cfg);
        let samples = two_samples(&cfg);
        let refs: Vec<&EditSample> = samples.iter().collect();
        let batch = prepare_batch(&ctx, &refs, false, 5).unwrap();
        let (_t, r) = step_losses(&ctx, &batch, 0, None).unwrap();
        let want = r.l_noise + cfg.beta_perceptual * r.l_p + cfg.gamma_layout * r.l_iou;
        assert!(
            (r.total - want).abs() < 1e-6,
            "total {} vs recombined {want}",
            r.total
        );
        assert!(r.l_p > 0.0 && r.l_iou > 0.0);
    }

    #[test]
    fn coefficient_kill_switches_reduce_total_to_noise_loss() {
        let mut cfg = small_cfg();
        cfg.beta_perceptual = 0.0;
        cfg.gamma_layout = 0.0;
        let ctx = TrainContext::new(&cfg, &Device::Cpu).unwrap();
        let samples = two_samples(&cfg);
        let refs: Vec<&EditSample> = samples.iter().collect();
        let batch = prepare_batch(&ctx, &refs, false, 5).unwrap();
        let (_t, r) = step_losses(&ctx, &batch, 0, None).unwrap();
        assert_eq!(r.total, r.l_noise);
        assert_eq!(r.l_p, 0.0);
        assert_eq!(r.l_iou, 0.0);
    }

    #[test]
    fn oracle_eps_injection_zeroes_the_noise_loss() {
        let mut cfg = small_cfg();
        cfg.beta_perceptual = 0.0;
        cfg.gamma_layout = 0.0;
        let ctx = TrainContext::new(&cfg, &Device::Cpu).unwrap();
        let samples = two_samples(&cfg);
        let refs: Vec<&EditSample> = samples.iter().collect();
        let batch = prepare_batch(&ctx, &refs, false, 5).unwrap();
        // Reconstruct the step's noise draw to inject it as the
        // prediction.
        let (b, c, h, w) = batch.z0.dims4().unwrap();
        let mut rng = RngStream::derive(cfg.seed, "train-noise", 3);
        let _ts: Vec<usize> = (0..b).map(|_| rng.gen_index(cfg.t_steps)).collect();
        let eps =
            NoiseSchedule::draw_training_noise(&mut rng, &[b, c, h, w], cfg.noise_offset, &Device::Cpu)
                .unwrap();
        let (_t, r) = step_losses(&ctx, &batch, 3, Some(&eps)).unwrap();
        assert_eq!(r.l_noise, 0.0);
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn perceptual_loss_without_recognizer_is_a_config_error() {
        let cfg = small_cfg();
        let ctx = TrainContext::new(&cfg, &Device::Cpu).unwrap();
        let samples = two_samples(&cfg);
        let refs: Vec<&EditSample> = samples.iter().collect();
        let batch = prepare_batch(&ctx, &refs, false, 5).unwrap();
        let err = step_losses(&ctx, &batch, 0, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err}");
    }

    #[test]
    fn training_step_updates_only_current_phase_parameters() {
        let mut cfg = small_cfg();
        cfg.beta_perceptual = 0.0;
        cfg.gamma_layout = 0.0;
        let mut ctx = ctx_with_recognizer(&cfg);
        ctx.enable_style().unwrap();
        let samples = two_samples(&cfg);
        let refs: Vec<&EditSample> = samples.iter().collect();

        let den_hash = |ctx: &TrainContext| {
            ctx.store
                .content_hash_matching(|n| n.starts_with("denoiser.") || n.starts_with("text_encoder."))
                .unwrap()
        };
        let style_hash = |ctx: &TrainContext| {
            ctx.store
                .content_hash_matching(|n| n.starts_with("style"))
                .unwrap()
        };

        // Adapter-only phase: style parameters move, denoiser frozen.
        let batch = prepare_batch(&ctx, &refs, true, 6).unwrap();
        let d0 = den_hash(&ctx);
        let s0 = style_hash(&ctx);
        let mut opt = ctx.optimizer(Phase::Phase2Adapter).unwrap();
        training_step(&ctx, &batch, 0, &mut opt).unwrap();
        assert_eq!(den_hash(&ctx), d0, "denoiser changed in adapter-only phase");
        assert_ne!(style_hash(&ctx), s0, "style branch did not train");

        // Phase 1: denoiser moves, style untouched.
        let batch = prepare_batch(&ctx, &refs, false, 7).unwrap();
        let s1 = style_hash(&ctx);
        let mut opt = ctx.optimizer(Phase::Phase1).unwrap();
        training_step(&ctx, &batch, 1, &mut opt).unwrap();
        assert_ne!(den_hash(&ctx), d0);
        assert_eq!(style_hash(&ctx), s1, "style branch changed in phase 1");
    }

    #[test]
    fn schedule_rides_along_in_the_store() {
        let cfg = small_cfg();
        let ctx = TrainContext::new(&cfg, &Device::Cpu).unwrap();
        let restored = NoiseSchedule::from_store(&ctx.store).unwrap();
        assert_eq!(restored.t_steps(), cfg.t_steps);
        // And the optimizer never sees it.
        for phase in [Phase::Phase1, Phase::Phase2Joint] {
            let vars = ctx.trainable_vars(phase);
            assert_eq!(
                vars.len(),
                ctx.store
                    .names()
                    .iter()
                    .filter(|n| !n.starts_with("schedule."))
                    .count(),
            );
        }
    }

    #[test]
    fn style_batches_carry_tokens_and_taller_canvases() {
        let cfg = small_cfg();
        let mut ctx = ctx_with_recognizer(&cfg);
        ctx.enable_style().unwrap();
        let samples = two_samples(&cfg);
        let refs: Vec<&EditSample> = samples.iter().collect();
        let batch = prepare_batch(&ctx, &refs, true, 9).unwrap();
        assert_eq!(
            batch.clean.dims(),
            &[2, 3, cfg.canvas_height(), cfg.width]
        );
        let tokens = batch.style_tokens.as_ref().unwrap();
        assert_eq!(tokens.dims(), &[2, cfg.style_tokens, cfg.style_dim]);
        assert_eq!(batch.masks[0].height, cfg.canvas_height());
        // Strip rows stay outside the mask region.
        assert!(batch.masks[0].region.y1 <= cfg.height as i32);
        let (_t, r) = step_losses(&ctx, &batch, 0, None).unwrap();
        assert!(r.total.is_finite());
    }
}
