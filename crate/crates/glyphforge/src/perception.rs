//! Perceptual supervision on the edited region: one-step latent
//! inversion, mask cropping, differentiable resizing, and a
//! glyph-feature distance plus pixel MSE under a frozen recognizer.
//!
//! The recognizer doubles as the crate's feature extractor: its column
//! head supplies perceptual features, its convolutional trunk feeds the
//! style extractor, and its greedy decoder drives evaluation.

use std::path::Path;

use candle_core::{Device, Module, Tensor};
use candle_nn::{AdamW, Conv2dConfig, GroupNorm, Linear, Optimizer, ParamsAdamW};
use image::RgbImage;

use crate::checkpoint::{
    check_compat, load_checkpoint, read_meta, save_checkpoint, CheckpointMeta, CHECKPOINT_SCHEMA,
};
use crate::config::RunConfig;
use crate::encoding::Alphabet;
use crate::error::{Error, Result};
use crate::glyph::{BBox, CharBox, MaskImage};
use crate::nn::{conv2d, group_norm, linear, ParamStore};
use crate::rngutil::{derive_seed, RngStream};

/// One-step estimate of the clean latent from a noisy latent and a
/// noise prediction: `ẑ₀ = (z_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn estimate_x0_latent(z_t: &Tensor, eps_pred: &Tensor, alpha_bar_t: f64) -> Result<Tensor> {
    if !(alpha_bar_t > 0.0 && alpha_bar_t <= 1.0) {
        return Err(Error::invalid(format!(
            "alpha_bar_t must be in (0, 1], got {alpha_bar_t}"
        )));
    }
    if z_t.dims() != eps_pred.dims() {
        return Err(Error::invalid(format!(
            "z_t shape {:?} does not match eps_pred shape {:?}",
            z_t.dims(),
            eps_pred.dims()
        )));
    }
    let scaled = (eps_pred * (1.0 - alpha_bar_t).sqrt())?;
    let num = (z_t - &scaled)?;
    Ok((num * (1.0 / alpha_bar_t.sqrt()))?)
}

/// Sub-image of a `[B, C, H, W]` tensor at the mask's rectangle.
pub fn crop_by_mask(image: &Tensor, mask: &MaskImage) -> Result<Tensor> {
    let (_b, _c, h, w) = image.dims4()?;
    if h != mask.height || w != mask.width {
        return Err(Error::invalid(format!(
            "mask is {}x{} but image is {h}x{w}",
            mask.height, mask.width
        )));
    }
    crop_box(image, &mask.region)
}

/// Sub-image of a `[B, C, H, W]` tensor at an arbitrary box.
pub fn crop_box(image: &Tensor, region: &BBox) -> Result<Tensor> {
    let (_b, _c, h, w) = image.dims4()?;
    let r = region.clamp_to(h as i32, w as i32)?;
    Ok(image
        .narrow(2, r.y0 as usize, r.height() as usize)?
        .narrow(3, r.x0 as usize, r.width() as usize)?)
}

/// Row-interpolation matrix `[out_n, in_n]` for bilinear resizing with
/// half-pixel centers; exactly the identity when `out_n == in_n`.
fn interp_matrix(out_n: usize, in_n: usize, device: &Device) -> Result<Tensor> {
    let mut data = vec![0.0f32; out_n * in_n];
    for j in 0..out_n {
        let src = ((j as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5)
            .clamp(0.0, (in_n - 1) as f64);
        let i0 = src.floor() as usize;
        let f = src - i0 as f64;
        let i1 = (i0 + 1).min(in_n - 1);
        data[j * in_n + i0] += (1.0 - f) as f32;
        if f > 0.0 {
            data[j * in_n + i1] += f as f32;
        }
    }
    Ok(Tensor::from_vec(data, &[out_n, in_n], device)?)
}

/// Differentiable bilinear resize of `[B, C, H, W]` to `(out_h, out_w)`
/// via separable interpolation matrices.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = t.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be nonzero"));
    }
    let mh = interp_matrix(out_h, h, t.device())?;
    let mw = interp_matrix(out_w, w, t.device())?;
    let x = t.reshape((b * c, h, w))?;
    let x = mh.broadcast_matmul(&x)?;
    let x = x.broadcast_matmul(&mw.t()?)?;
    Ok(x.reshape((b, c, out_h, out_w))?)
}

/// `[1, 3, H, W]` float tensor in [0,1] from an RGB image.
pub fn rgb_to_tensor(img: &RgbImage, device: &Device) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[ch * h * w + y as usize * w + x as usize] = p.0[ch] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(data, &[1, 3, h, w], device)?)
}

struct ConvBlock {
    conv: candle_nn::Conv2d,
    norm: GroupNorm,
    pool_height: bool,
}

impl ConvBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = self.norm.forward(&self.conv.forward(x)?)?.silu()?;
        if self.pool_height {
            x = x.avg_pool2d((2, 1))?;
        }
        Ok(x)
    }
}

struct TrunkHead {
    blocks: Vec<ConvBlock>,
    fc1: Linear,
    fc2: Linear,
}

/// Small convolutional glyph recognizer: four conv stages shared with
/// the style extractor, then a per-column two-layer head classifying
/// each of `rec_width/4` columns over the alphabet plus the pad class
/// (which doubles as the blank). The tap after the first fully
/// connected layer provides the perceptual features.
///
/// Feature and recognition methods run on a frozen twin of the
/// parameters (detached aliases of the same storage), so losses built
/// on them propagate gradients to their inputs but never to the
/// recognizer itself; [`Recognizer::train_logits`] exposes the tracked
/// path for training the recognizer proper.
pub struct Recognizer {
    tracked: TrunkHead,
    frozen: TrunkHead,
    rec_h: usize,
    rec_w: usize,
    vocab: usize,
    feat_dim: usize,
}

/// Checkpoint `kind` string for recognizer parameter blobs.
pub const RECOGNIZER_KIND: &str = "recognizer";
const TRUNK_CHANNELS: [usize; 4] = [32, 64, 96, 128];
/// Width of the trunk feature vector (also the per-column width).
pub const FEATURE_DIM: usize = 128;

fn conv_cfg(stride2: bool) -> Conv2dConfig {
    Conv2dConfig {
        padding: 1,
        stride: if stride2 { 2 } else { 1 },
        ..Default::default()
    }
}

fn frozen_pair(store: &ParamStore, name: &str) -> Result<(Tensor, Tensor)> {
    let fetch = |suffix: &str| {
        store
            .get(&format!("{name}.{suffix}"))
            .map(|t| t.detach())
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}.{suffix}")))
    };
    Ok((fetch("weight")?, fetch("bias")?))
}

impl Recognizer {
    /// Builds the recognizer on `store`, creating parameters when
    /// absent and adopting them (e.g. from a checkpoint) when present.
    pub fn new(store: &mut ParamStore, cfg: &RunConfig, vocab: usize) -> Result<Self> {
        if cfg.rec_height % 16 != 0 || cfg.rec_width % 4 != 0 {
            return Err(Error::Config(format!(
                "recognizer input {}x{} must be divisible by 16x4",
                cfg.rec_height, cfg.rec_width
            )));
        }
        let mut rng = RngStream::derive(cfg.seed, "recognizer-init", 0);
        let mut blocks = Vec::new();
        let mut in_c = 3;
        for (i, &out_c) in TRUNK_CHANNELS.iter().enumerate() {
            let stride2 = i < 2;
            let conv = conv2d(
                store,
                &mut rng,
                &format!("recognizer.conv{i}"),
                in_c,
                out_c,
                3,
                conv_cfg(stride2),
            )?;
            let norm = group_norm(store, &mut rng, &format!("recognizer.norm{i}"), out_c, 8)?;
            blocks.push(ConvBlock {
                conv,
                norm,
                pool_height: !stride2,
            });
            in_c = out_c;
        }
        let fc1 = linear(store, &mut rng, "recognizer.fc1", FEATURE_DIM, FEATURE_DIM)?;
        let fc2 = linear(store, &mut rng, "recognizer.fc2", FEATURE_DIM, vocab)?;
        let tracked = TrunkHead { blocks, fc1, fc2 };

        let mut frozen_blocks = Vec::new();
        for (i, &out_c) in TRUNK_CHANNELS.iter().enumerate() {
            let stride2 = i < 2;
            let (cw, cb) = frozen_pair(store, &format!("recognizer.conv{i}"))?;
            let (nw, nb) = frozen_pair(store, &format!("recognizer.norm{i}"))?;
            frozen_blocks.push(ConvBlock {
                conv: candle_nn::Conv2d::new(cw, Some(cb), conv_cfg(stride2)),
                norm: GroupNorm::new(nw, nb, out_c, 8, 1e-5)?,
                pool_height: !stride2,
            });
        }
        let (f1w, f1b) = frozen_pair(store, "recognizer.fc1")?;
        let (f2w, f2b) = frozen_pair(store, "recognizer.fc2")?;
        let frozen = TrunkHead {
            blocks: frozen_blocks,
            fc1: Linear::new(f1w, Some(f1b)),
            fc2: Linear::new(f2w, Some(f2b)),
        };

        Ok(Recognizer {
            tracked,
            frozen,
            rec_h: cfg.rec_height,
            rec_w: cfg.rec_width,
            vocab,
            feat_dim: FEATURE_DIM,
        })
    }

    pub fn input_hw(&self) -> (usize, usize) {
        (self.rec_h, self.rec_w)
    }

    /// Number of classified columns (`rec_width / 4`).
    pub fn columns(&self) -> usize {
        self.rec_w / 4
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn feature_dim(&self) -> usize {
        self.feat_dim
    }

    /// Resizes an arbitrary `[B, 3, H, W]` region to the recognizer
    /// input resolution.
    pub fn resize_to_input(&self, region: &Tensor) -> Result<Tensor> {
        resize_bilinear(region, self.rec_h, self.rec_w)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_b, c, h, w) = x.dims4()?;
        if c != 3 || h != self.rec_h || w != self.rec_w {
            return Err(Error::invalid(format!(
                "recognizer expects [B, 3, {}, {}], got {:?}",
                self.rec_h,
                self.rec_w,
                x.dims()
            )));
        }
        Ok(())
    }

    fn head_trunk(head: &TrunkHead, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for b in &head.blocks {
            x = b.forward(&x)?;
        }
        Ok(x)
    }

    fn head_columns(head: &TrunkHead, x: &Tensor) -> Result<Tensor> {
        let t = Self::head_trunk(head, x)?;
        let t = t.mean(2)?.transpose(1, 2)?.contiguous()?;
        Ok(head.fc1.forward(&t)?.silu()?)
    }

    /// Convolutional trunk output `[B, C, 2, cols]` on an
    /// input-resolution tensor (frozen parameters).
    pub fn trunk(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Self::head_trunk(&self.frozen, x)
    }

    /// Global average pooled trunk features `[B, C]`, the shared tap
    /// for the style extractor (frozen parameters).
    pub fn style_features(&self, x: &Tensor) -> Result<Tensor> {
        let t = self.trunk(x)?;
        Ok(t.mean(3)?.mean(2)?)
    }

    /// Per-column perceptual features `[B, cols, feat_dim]` (first
    /// fully connected layer activations, frozen parameters).
    pub fn column_features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Self::head_columns(&self.frozen, x)
    }

    /// Per-column class logits `[B, cols, vocab]` (frozen parameters).
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.frozen.fc2.forward(&self.column_features(x)?)?)
    }

    /// Per-column class logits on the tracked parameters, for training
    /// the recognizer itself.
    pub fn train_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let cols = Self::head_columns(&self.tracked, x)?;
        Ok(self.tracked.fc2.forward(&cols)?)
    }

    /// Recognizes the text in an arbitrary-size `[1, 3, H, W]` region.
    pub fn recognize(&self, region: &Tensor, alphabet: &Alphabet) -> Result<String> {
        let x = self.resize_to_input(&region.detach())?;
        let logits = self.logits(&x)?;
        let ids = logits.get(0)?.argmax(1)?.to_vec1::<u32>()?;
        Ok(greedy_decode(&ids, alphabet))
    }
}

/// Collapses a per-column class sequence into text: adjacent repeats
/// merge, pad (blank) columns separate runs and are dropped.
pub fn greedy_decode(ids: &[u32], alphabet: &Alphabet) -> String {
    let pad = alphabet.pad_id();
    let mut out = String::new();
    let mut prev = None;
    for &id in ids {
        if prev != Some(id) && id != pad {
            if let Some(ch) = alphabet.char_of(id) {
                out.push(ch);
            }
        }
        prev = Some(id);
    }
    out
}

/// Per-column training labels for a crop of a labeled sample. Columns
/// whose center falls in a character's ink box get that character;
/// columns between boxes that flank a space get the space class; all
/// others get pad. A pad column is forced at the junction of adjacent
/// identical characters so the greedy decoder can separate them.
pub fn column_labels(
    text: &str,
    char_boxes: &[CharBox],
    crop: &BBox,
    columns: usize,
    alphabet: &Alphabet,
) -> Result<Vec<u32>> {
    let aligned = crate::data::align_char_boxes(text, char_boxes)?;
    let chars: Vec<char> = text.chars().collect();
    let pad = alphabet.pad_id();
    let col_w = crop.width() as f64 / columns as f64;
    let center = |j: usize| crop.x0 as f64 + (j as f64 + 0.5) * col_w;

    // Horizontal spans of spaces, bounded by the nearest inked
    // neighbors.
    let mut space_spans: Vec<(f64, f64)> = Vec::new();
    for (p, ch) in chars.iter().enumerate() {
        if *ch != ' ' {
            continue;
        }
        let left = aligned[..p].iter().rev().flatten().next();
        let right = aligned[p + 1..].iter().flatten().next();
        if let (Some(l), Some(r)) = (left, right) {
            if r.x0 > l.x1 {
                space_spans.push((l.x1 as f64, r.x0 as f64));
            }
        }
    }
    let space_id = alphabet.id_of(' ');

    let mut labels = vec![pad; columns];
    for (j, label) in labels.iter_mut().enumerate() {
        let x = center(j);
        let hit = aligned
            .iter()
            .zip(&chars)
            .find(|(b, _)| b.is_some_and(|b| x >= b.x0 as f64 && x < b.x1 as f64));
        if let Some((_, ch)) = hit {
            *label = alphabet
                .id_of(*ch)
                .ok_or_else(|| Error::UnknownChars(vec![*ch]))?;
        } else if let Some(sid) = space_id {
            if space_spans.iter().any(|(a, b)| x >= *a && x < *b) {
                *label = sid;
            }
        }
    }
    for p in 0..chars.len().saturating_sub(1) {
        if chars[p] == chars[p + 1] {
            if let (Some(a), Some(b)) = (aligned[p], aligned[p + 1]) {
                let boundary = (a.x1 as f64 + b.x0 as f64) / 2.0;
                let jm = ((boundary - crop.x0 as f64) / col_w - 0.5).round();
                let jm = (jm.max(0.0) as usize).min(columns - 1);
                labels[jm] = pad;
            }
        }
    }
    Ok(labels)
}

/// Feature distance, pixel MSE and their sum. `total` keeps the
/// autograd graph; the floats are detached conveniences.
pub struct PerceptualParts {
    pub total: Tensor,
    pub feature: f64,
    pub pixel: f64,
}

/// Squared-L2 distance between recognizer features of the two regions
/// plus mean squared pixel error, averaged over the batch. Gradients
/// flow through `x_hat` only: `x` and the recognizer weights are
/// detached.
pub fn perceptual_loss(x: &Tensor, x_hat: &Tensor, recognizer: &Recognizer) -> Result<PerceptualParts> {
    if x.dims() != x_hat.dims() {
        return Err(Error::invalid(format!(
            "region shapes differ: {:?} vs {:?}",
            x.dims(),
            x_hat.dims()
        )));
    }
    let (b, _c, _h, _w) = x.dims4()?;
    let x = x.detach();
    let fa = recognizer.column_features(&recognizer.resize_to_input(&x)?)?;
    let fb = recognizer.column_features(&recognizer.resize_to_input(x_hat)?)?;
    let feature = ((&fb - &fa.detach())?.sqr()?.sum_all()? / b as f64)?;
    let pixel = (x_hat - &x)?.sqr()?.mean_all()?;
    let total = (&feature + &pixel)?;
    Ok(PerceptualParts {
        feature: feature.to_scalar::<f32>()? as f64,
        pixel: pixel.to_scalar::<f32>()? as f64,
        total,
    })
}

/// Loads a recognizer checkpoint, verifying kind and alphabet hash.
pub fn load_recognizer(
    path: &Path,
    cfg: &RunConfig,
    alphabet: &Alphabet,
) -> Result<(ParamStore, Recognizer, CheckpointMeta)> {
    let meta = read_meta(path)?;
    check_compat(&meta, RECOGNIZER_KIND, None, &alphabet.hash())?;
    let (mut store, meta) = load_checkpoint(path, &Device::Cpu)?;
    let model = Recognizer::new(&mut store, cfg, alphabet.vocab_size())?;
    Ok((store, model, meta))
}

/// Knobs for [`train_recognizer`].
#[derive(Debug, Clone)]
pub struct RecognizerTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Held-out samples scored after training.
    pub holdout: usize,
    pub seed: u64,
}

impl Default for RecognizerTrainOptions {
    fn default() -> Self {
        RecognizerTrainOptions {
            steps: 1500,
            batch_size: 16,
            lr: 1e-3,
            holdout: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RecognizerReport {
    pub steps: usize,
    pub final_loss: f64,
    pub holdout_accuracy: f64,
    pub holdout_samples: usize,
}

/// Edit-region crop of a sample, resized to the recognizer input.
pub fn sample_region_input(
    recognizer: &Recognizer,
    sample: &crate::data::EditSample,
    device: &Device,
) -> Result<Tensor> {
    let t = rgb_to_tensor(&sample.image, device)?;
    recognizer.resize_to_input(&crop_box(&t, &sample.edit_box)?)
}

fn recognizer_batch(
    cfg: &RunConfig,
    recognizer: &Recognizer,
    alphabet: &Alphabet,
    seeds: &[u64],
    device: &Device,
) -> Result<(Tensor, Tensor)> {
    let mut xs = Vec::with_capacity(seeds.len());
    let mut ys: Vec<u32> = Vec::with_capacity(seeds.len() * recognizer.columns());
    for &s in seeds {
        let sample = crate::data::generate_sample(s, cfg, None)?;
        xs.push(sample_region_input(recognizer, &sample, device)?);
        ys.extend(column_labels(
            &sample.text,
            &sample.char_boxes,
            &sample.edit_box,
            recognizer.columns(),
            alphabet,
        )?);
    }
    let y = Tensor::from_vec(ys, &[seeds.len() * recognizer.columns()], device)?;
    Ok((Tensor::cat(&xs, 0)?, y))
}

/// Exact-match rate over `n` freshly generated held-out samples (seed
/// role "rec-holdout", disjoint from the training stream).
pub fn recognizer_accuracy(
    recognizer: &Recognizer,
    cfg: &RunConfig,
    alphabet: &Alphabet,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("holdout size must be positive"));
    }
    let device = Device::Cpu;
    let mut hits = 0usize;
    for i in 0..n {
        let s = crate::data::generate_sample(derive_seed(seed, "rec-holdout", i as u64), cfg, None)?;
        let t = rgb_to_tensor(&s.image, &device)?;
        let read = recognizer.recognize(&crop_box(&t, &s.edit_box)?, alphabet)?;
        if read == s.text {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Trains the recognizer on on-the-fly synthetic region crops with
/// per-column cross-entropy, scores it on held-out samples and
/// (optionally) writes a checkpoint.
pub fn train_recognizer(
    cfg: &RunConfig,
    opts: &RecognizerTrainOptions,
    out_path: Option<&Path>,
) -> Result<(ParamStore, Recognizer, RecognizerReport)> {
    let device = Device::Cpu;
    let alphabet = cfg.alphabet()?;
    let mut store = ParamStore::new(device.clone());
    let recognizer = Recognizer::new(&mut store, cfg, alphabet.vocab_size())?;
    let mut opt = AdamW::new(
        store.all_vars(),
        ParamsAdamW {
            lr: opts.lr,
            ..Default::default()
        },
    )?;
    let mut final_loss = f64::NAN;
    for step in 0..opts.steps {
        let seeds: Vec<u64> = (0..opts.batch_size)
            .map(|i| {
                derive_seed(
                    opts.seed,
                    "rec-train",
                    (step * opts.batch_size + i) as u64,
                )
            })
            .collect();
        let (x, y) = recognizer_batch(cfg, &recognizer, &alphabet, &seeds, &device)?;
        let logits = recognizer.train_logits(&x)?;
        let (b, cols, v) = logits.dims3()?;
        let loss = candle_nn::loss::cross_entropy(&logits.reshape((b * cols, v))?, &y)?;
        final_loss = loss.to_scalar::<f32>()? as f64;
        if !final_loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite recognizer loss at step {step}"
            )));
        }
        opt.backward_step(&loss)?;
    }
    let holdout_accuracy =
        recognizer_accuracy(&recognizer, cfg, &alphabet, opts.holdout, opts.seed)?;
    if let Some(path) = out_path {
        let meta = CheckpointMeta {
            kind: RECOGNIZER_KIND.to_string(),
            config_hash: cfg.content_hash(),
            alphabet_hash: alphabet.hash(),
            step: opts.steps,
            phase: "recognizer".to_string(),
            schema_version: CHECKPOINT_SCHEMA,
        };
        save_checkpoint(path, &store, &meta)?;
    }
    let report = RecognizerReport {
        steps: opts.steps,
        final_loss,
        holdout_accuracy,
        holdout_samples: opts.holdout,
    };
    Ok((store, recognizer, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyph::BBox;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn estimate_x0_is_identity_at_alpha_one() {
        let mut rng = RngStream::new(1);
        let z = rng.normal_tensor(&[2, 3, 4, 5], &dev()).unwrap();
        let e = rng.normal_tensor(&[2, 3, 4, 5], &dev()).unwrap();
        let out = estimate_x0_latent(&z, &e, 1.0).unwrap();
        let d: f32 = (&out - &z)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar()
            .unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn estimate_x0_inverts_forward_noising() {
        let mut rng = RngStream::new(2);
        let z0 = rng.normal_tensor(&[1, 4, 8, 16], &dev()).unwrap();
        let eps = rng.normal_tensor(&[1, 4, 8, 16], &dev()).unwrap();
        for ab in [0.999f64, 0.5, 0.11, 0.013] {
            let z_t = ((&z0 * ab.sqrt()).unwrap() + (&eps * (1.0 - ab).sqrt()).unwrap()).unwrap();
            let rec = estimate_x0_latent(&z_t, &eps, ab).unwrap();
            let d: f32 = (&rec - &z0)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar()
                .unwrap();
            assert!(d < 1e-5, "alpha_bar {ab}: max err {d}");
        }
    }

    #[test]
    fn estimate_x0_matches_scalar_oracle() {
        let mut rng = RngStream::new(3);
        let z = rng.normal_tensor(&[1, 1, 2, 3], &dev()).unwrap();
        let e = rng.normal_tensor(&[1, 1, 2, 3], &dev()).unwrap();
        let ab = 0.37;
        let out = estimate_x0_latent(&z, &e, ab).unwrap();
        let zv: Vec<f32> = z.flatten_all().unwrap().to_vec1().unwrap();
        let ev: Vec<f32> = e.flatten_all().unwrap().to_vec1().unwrap();
        let ov: Vec<f32> = out.flatten_all().unwrap().to_vec1().unwrap();
        for i in 0..zv.len() {
            let want = (zv[i] as f64 - (1.0 - ab).sqrt() * ev[i] as f64) / ab.sqrt();
            assert!((ov[i] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn estimate_x0_rejects_bad_alpha_and_shapes() {
        let mut rng = RngStream::new(4);
        let z = rng.normal_tensor(&[1, 1, 2, 2], &dev()).unwrap();
        let e = rng.normal_tensor(&[1, 1, 2, 2], &dev()).unwrap();
        assert!(estimate_x0_latent(&z, &e, 0.0).is_err());
        assert!(estimate_x0_latent(&z, &e, -0.2).is_err());
        assert!(estimate_x0_latent(&z, &e, 1.2).is_err());
        let e2 = rng.normal_tensor(&[1, 1, 2, 3], &dev()).unwrap();
        assert!(estimate_x0_latent(&z, &e2, 0.5).is_err());
    }

    #[test]
    fn estimate_x0_is_linear() {
        let mut rng = RngStream::new(5);
        let z1 = rng.normal_tensor(&[1, 2, 3, 3], &dev()).unwrap();
        let z2 = rng.normal_tensor(&[1, 2, 3, 3], &dev()).unwrap();
        let e1 = rng.normal_tensor(&[1, 2, 3, 3], &dev()).unwrap();
        let e2 = rng.normal_tensor(&[1, 2, 3, 3], &dev()).unwrap();
        let ab = 0.42;
        let lhs = estimate_x0_latent(
            &(&z1 + &z2).unwrap(),
            &(&e1 + &e2).unwrap(),
            ab,
        )
        .unwrap();
        let rhs = (estimate_x0_latent(&z1, &e1, ab).unwrap()
            + estimate_x0_latent(&z2, &e2, ab).unwrap())
        .unwrap();
        let d: f32 = (&lhs - &rhs)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar()
            .unwrap();
        assert!(d < 1e-5);
    }

    #[test]
    fn crop_matches_slicing_oracle() {
        let mut rng = RngStream::new(6);
        let img = rng.normal_tensor(&[1, 3, 10, 20], &dev()).unwrap();
        let mask = MaskImage::new(10, 20, BBox::new(4, 2, 13, 7).unwrap()).unwrap();
        let crop = crop_by_mask(&img, &mask).unwrap();
        assert_eq!(crop.dims(), &[1, 3, 5, 9]);
        for c in 0..3 {
            for y in 0..5 {
                for x in 0..9 {
                    let want: f32 = img
                        .get(0)
                        .unwrap()
                        .get(c)
                        .unwrap()
                        .get(y + 2)
                        .unwrap()
                        .get(x + 4)
                        .unwrap()
                        .to_scalar()
                        .unwrap();
                    let got: f32 = crop
                        .get(0)
                        .unwrap()
                        .get(c)
                        .unwrap()
                        .get(y)
                        .unwrap()
                        .get(x)
                        .unwrap()
                        .to_scalar()
                        .unwrap();
                    assert_eq!(want, got);
                }
            }
        }
    }

    #[test]
    fn full_and_single_pixel_crops() {
        let mut rng = RngStream::new(7);
        let img = rng.normal_tensor(&[1, 3, 6, 8], &dev()).unwrap();
        let full = crop_by_mask(&img, &MaskImage::new(6, 8, BBox::new(0, 0, 8, 6).unwrap()).unwrap())
            .unwrap();
        assert_eq!(full.dims(), img.dims());
        let one = crop_by_mask(&img, &MaskImage::new(6, 8, BBox::new(3, 2, 4, 3).unwrap()).unwrap())
            .unwrap();
        assert_eq!(one.dims(), &[1, 3, 1, 1]);
        let bad = MaskImage::new(4, 4, BBox::new(0, 0, 2, 2).unwrap()).unwrap();
        assert!(crop_by_mask(&img, &bad).is_err());
    }

    #[test]
    fn resize_same_size_is_identity() {
        let mut rng = RngStream::new(8);
        let t = rng.normal_tensor(&[1, 2, 5, 7], &dev()).unwrap();
        let r = resize_bilinear(&t, 5, 7).unwrap();
        let d: f32 = (&r - &t)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar()
            .unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn resize_matches_bilinear_oracle_2x() {
        // Upscale [1,1,2,2] -> (4,4) with half-pixel centers: the
        // interior samples sit 0.25/0.75 between the two sources.
        let t = Tensor::from_vec(vec![0.0f32, 1.0, 2.0, 3.0], &[1, 1, 2, 2], &dev()).unwrap();
        let r = resize_bilinear(&t, 4, 4).unwrap();
        let v: Vec<f32> = r.flatten_all().unwrap().to_vec1().unwrap();
        let rows = [0.0f32, 0.25, 0.75, 1.0];
        for (j, ry) in rows.iter().enumerate() {
            for (i, rx) in rows.iter().enumerate() {
                let want = (1.0 - ry) * ((1.0 - rx) * 0.0 + rx * 1.0)
                    + ry * ((1.0 - rx) * 2.0 + rx * 3.0);
                assert!(
                    (v[j * 4 + i] - want).abs() < 1e-6,
                    "({i},{j}): got {} want {want}",
                    v[j * 4 + i]
                );
            }
        }
    }

    #[test]
    fn resize_rows_sum_to_one() {
        for (o, n) in [(32, 17), (5, 40), (128, 128), (3, 1)] {
            let m = interp_matrix(o, n, &dev()).unwrap();
            let sums: Vec<f32> = m.sum(1).unwrap().to_vec1().unwrap();
            for s in sums {
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    fn tiny_cfg() -> RunConfig {
        RunConfig::default()
    }

    fn tiny_recognizer() -> (ParamStore, Recognizer) {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(Device::Cpu);
        let model = Recognizer::new(&mut store, &cfg, 39).unwrap();
        (store, model)
    }

    #[test]
    fn recognizer_shapes_are_consistent() {
        let (_store, model) = tiny_recognizer();
        let mut rng = RngStream::new(9);
        let x = rng
            .uniform_tensor(&[2, 3, 32, 128], 0.0, 1.0, &dev())
            .unwrap();
        assert_eq!(model.columns(), 32);
        let f = model.column_features(&x).unwrap();
        assert_eq!(f.dims(), &[2, 32, 128]);
        let l = model.logits(&x).unwrap();
        assert_eq!(l.dims(), &[2, 32, 39]);
        let s = model.style_features(&x).unwrap();
        assert_eq!(s.dims(), &[2, 128]);
    }

    #[test]
    fn perceptual_loss_zero_on_identical_regions() {
        let (_store, model) = tiny_recognizer();
        let mut rng = RngStream::new(10);
        let x = rng.uniform_tensor(&[1, 3, 12, 40], 0.0, 1.0, &dev()).unwrap();
        let parts = perceptual_loss(&x, &x.copy().unwrap(), &model).unwrap();
        assert_eq!(parts.feature, 0.0);
        assert_eq!(parts.pixel, 0.0);
        assert_eq!(parts.total.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn constant_shift_gives_c_squared_pixel_term() {
        let (_store, model) = tiny_recognizer();
        let mut rng = RngStream::new(11);
        let x = rng.uniform_tensor(&[1, 3, 10, 30], 0.2, 0.8, &dev()).unwrap();
        let c = 0.1;
        let x_hat = (&x + c).unwrap();
        let parts = perceptual_loss(&x, &x_hat, &model).unwrap();
        assert!((parts.pixel - c * c).abs() < 1e-6, "pixel {}", parts.pixel);
        assert!(parts.feature >= 0.0);
        assert!(
            parts.total.to_scalar::<f32>().unwrap() as f64 >= parts.pixel - 1e-6
        );
    }

    #[test]
    fn perceptual_loss_rejects_shape_mismatch() {
        let (_store, model) = tiny_recognizer();
        let mut rng = RngStream::new(12);
        let a = rng.uniform_tensor(&[1, 3, 8, 8], 0.0, 1.0, &dev()).unwrap();
        let b = rng.uniform_tensor(&[1, 3, 8, 9], 0.0, 1.0, &dev()).unwrap();
        assert!(perceptual_loss(&a, &b, &model).is_err());
    }

    #[test]
    fn perceptual_gradient_matches_directional_fd() {
        let (_store, model) = tiny_recognizer();
        let mut rng = RngStream::new(13);
        for trial in 0..10 {
            let base = rng.uniform_vec(3 * 8 * 24, 0.2, 0.8);
            let dir = rng.normal_vec(3 * 8 * 24);
            let norm: f32 = dir.iter().map(|v| v * v).sum::<f32>().sqrt();
            let dir: Vec<f32> = dir.iter().map(|v| v / norm).collect();
            let x = Tensor::from_vec(base.clone(), &[1, 3, 8, 24], &dev()).unwrap();
            let x_hat = candle_core::Var::from_vec(
                base.iter()
                    .zip(&dir)
                    .map(|(b, d)| b + 0.3 * d)
                    .collect::<Vec<f32>>(),
                &[1, 3, 8, 24],
                &dev(),
            )
            .unwrap();
            let parts = perceptual_loss(&x, x_hat.as_tensor(), &model).unwrap();
            let grads = parts.total.backward().unwrap();
            let g = grads.get(&x_hat).expect("grad on x_hat");
            let gv: Vec<f32> = g.flatten_all().unwrap().to_vec1().unwrap();
            let analytic: f64 = gv.iter().zip(&dir).map(|(g, d)| *g as f64 * *d as f64).sum();

            let h = 1e-2f32;
            let eval = |offset: f32| -> f64 {
                let data: Vec<f32> = base
                    .iter()
                    .zip(&dir)
                    .map(|(b, d)| b + (0.3 + offset) * d)
                    .collect();
                let xt = Tensor::from_vec(data, &[1, 3, 8, 24], &dev()).unwrap();
                perceptual_loss(&x, &xt, &model)
                    .unwrap()
                    .total
                    .to_scalar::<f32>()
                    .unwrap() as f64
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h as f64);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                rel < 1e-3,
                "trial {trial}: analytic {analytic} vs fd {fd} (rel {rel})"
            );
        }
    }

    #[test]
    fn perceptual_loss_leaves_recognizer_grad_free() {
        let (store, model) = tiny_recognizer();
        let before = store.content_hash().unwrap();
        let mut rng = RngStream::new(14);
        let x = rng.uniform_tensor(&[1, 3, 8, 16], 0.0, 1.0, &dev()).unwrap();
        let x_hat = candle_core::Var::from_tensor(
            &rng.uniform_tensor(&[1, 3, 8, 16], 0.0, 1.0, &dev()).unwrap(),
        )
        .unwrap();
        let parts = perceptual_loss(&x, x_hat.as_tensor(), &model).unwrap();
        let grads = parts.total.backward().unwrap();
        assert!(grads.get(&x_hat).is_some());
        for v in store.all_vars() {
            assert!(
                grads.get(&v).is_none(),
                "recognizer parameter received a gradient"
            );
        }
        assert_eq!(store.content_hash().unwrap(), before);
    }

    #[test]
    fn greedy_decode_collapses_runs_and_blanks() {
        let alphabet = Alphabet::default_latin();
        let id = |c: char| alphabet.id_of(c).unwrap();
        let pad = alphabet.pad_id();
        let ids = vec![
            pad,
            id('H'),
            id('H'),
            pad,
            id('I'),
            id('I'),
            pad,
            pad,
            id('I'),
        ];
        assert_eq!(greedy_decode(&ids, &alphabet), "HII");
    }

    #[test]
    fn column_labels_cover_chars_spaces_and_junctions() {
        let alphabet = Alphabet::default_latin();
        let boxes = vec![
            CharBox {
                ch: 'A',
                bbox: BBox::new(0, 0, 10, 10).unwrap(),
            },
            CharBox {
                ch: 'B',
                bbox: BBox::new(20, 0, 30, 10).unwrap(),
            },
        ];
        let crop = BBox::new(0, 0, 30, 10).unwrap();
        let labels = column_labels("A B", &boxes, &crop, 30, &alphabet).unwrap();
        assert_eq!(labels[5], alphabet.id_of('A').unwrap());
        assert_eq!(labels[15], alphabet.id_of(' ').unwrap());
        assert_eq!(labels[25], alphabet.id_of('B').unwrap());
        assert_eq!(greedy_decode(&labels, &alphabet), "A B");

        let boxes = vec![
            CharBox {
                ch: 'L',
                bbox: BBox::new(0, 0, 10, 10).unwrap(),
            },
            CharBox {
                ch: 'L',
                bbox: BBox::new(10, 0, 20, 10).unwrap(),
            },
        ];
        let crop = BBox::new(0, 0, 20, 10).unwrap();
        let labels = column_labels("LL", &boxes, &crop, 20, &alphabet).unwrap();
        assert_eq!(greedy_decode(&labels, &alphabet), "LL");
        assert!(labels.contains(&alphabet.pad_id()), "junction blank forced");
    }

    #[test]
    fn column_labels_on_generated_samples_decode_to_text() {
        let cfg = tiny_cfg();
        let alphabet = cfg.alphabet().unwrap();
        let mut ok = 0;
        let n = 30;
        for seed in 100..100 + n as u64 {
            let s = crate::data::generate_sample(seed, &cfg, None).unwrap();
            let labels =
                column_labels(&s.text, &s.char_boxes, &s.edit_box, 32, &alphabet).unwrap();
            if greedy_decode(&labels, &alphabet) == s.text {
                ok += 1;
            }
        }
        assert!(
            ok as f64 >= 0.9 * n as f64,
            "only {ok}/{n} label sequences decode back to their text"
        );
    }
}
