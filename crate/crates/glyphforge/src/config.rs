//! Run configuration: one TOML file holding every tunable, with a
//! content hash that binds checkpoints, corpora and reports to the
//! exact settings that produced them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoding::Alphabet;
use crate::error::{Error, Result};
use crate::glyph::AdaptiveCropParams;
use crate::layout::LayoutParams;

/// Latent codec selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    /// Deterministic resample codec (area down / bilinear up); exact,
    /// training-free, used for unit tests and reproducibility checks.
    Identity,
    /// Trained tiny autoencoder (must meet the PSNR gate before use).
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Model-input geometry.
    pub height: usize,
    pub width: usize,
    pub latent_channels: usize,
    pub latent_factor: usize,

    // Text conditioning.
    pub k_max: usize,
    pub d_model: usize,
    /// Path to an alphabet file; the built-in A–Z 0–9 space newline
    /// alphabet when absent.
    pub alphabet_file: Option<PathBuf>,

    // Noise schedule.
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub noise_offset: f64,

    // Loss weights.
    pub beta_perceptual: f64,
    pub gamma_layout: f64,

    // Attention-layout pipeline.
    pub attn_threshold: f64,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub box_threshold: f64,
    pub top_k_layers: usize,
    /// Training step at which layout layers are scored and frozen.
    pub layer_select_step: usize,

    // Crop and mask.
    pub char_threshold: usize,
    pub expand_ratio: f64,
    pub mask_expand_frac: f64,

    // Style adapter and in-context reference.
    pub style_tokens: usize,
    pub style_dim: usize,
    pub strip_frac: f64,

    // Denoiser size.
    pub unet_channels: Vec<usize>,
    pub unet_heads: usize,

    // Codec.
    pub codec: CodecKind,

    // Recognizer input resolution.
    pub rec_height: usize,
    pub rec_width: usize,

    // Synthetic data.
    pub min_text_len: usize,
    pub max_text_len: usize,

    // Training schedule.
    pub batch_size: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub steps_phase1: usize,
    pub steps_phase2_adapter: usize,
    pub steps_phase2_joint: usize,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            height: 64,
            width: 256,
            latent_channels: 4,
            latent_factor: 4,
            k_max: 16,
            d_model: 96,
            alphabet_file: None,
            t_steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            noise_offset: 0.02,
            beta_perceptual: 0.1,
            gamma_layout: 0.05,
            attn_threshold: 125.0,
            blur_kernel: 5,
            blur_sigma: 1.0,
            box_threshold: 127.0,
            top_k_layers: 3,
            layer_select_step: 400,
            char_threshold: 9,
            expand_ratio: 0.1,
            mask_expand_frac: 0.3,
            style_tokens: 4,
            style_dim: 96,
            strip_frac: 0.125,
            unet_channels: vec![48, 96, 144],
            unet_heads: 4,
            codec: CodecKind::Identity,
            rec_height: 32,
            rec_width: 128,
            min_text_len: 2,
            max_text_len: 10,
            batch_size: 8,
            lr_phase1: 1e-4,
            lr_phase2: 1e-5,
            steps_phase1: 8000,
            steps_phase2_adapter: 2000,
            steps_phase2_joint: 1000,
            checkpoint_every: 1000,
            eval_every: 500,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.height == 0 || self.width == 0 {
            return fail("zero model resolution".into());
        }
        if self.latent_factor == 0
            || self.height % self.latent_factor != 0
            || self.width % self.latent_factor != 0
        {
            return fail(format!(
                "resolution {}x{} not divisible by latent factor {}",
                self.height, self.width, self.latent_factor
            ));
        }
        if self.latent_h() < 4 || self.latent_w() < 4 {
            return fail("latent grid smaller than 4x4".into());
        }
        if self.k_max == 0 {
            return fail("k_max must be positive".into());
        }
        if self.t_steps < 2 {
            return fail("t_steps must be at least 2".into());
        }
        if !(self.beta_start > 0.0 && self.beta_end > self.beta_start && self.beta_end < 1.0) {
            return fail(format!(
                "invalid beta range [{}, {}]",
                self.beta_start, self.beta_end
            ));
        }
        if self.blur_kernel % 2 == 0 {
            return fail("blur kernel must be odd".into());
        }
        if self.unet_channels.len() != 3 {
            return fail("unet_channels must list three stages".into());
        }
        if self.max_text_len < self.min_text_len || self.min_text_len == 0 {
            return fail("invalid text length range".into());
        }
        if self.max_text_len > self.k_max {
            return fail(format!(
                "max_text_len {} exceeds k_max {}",
                self.max_text_len, self.k_max
            ));
        }
        if !(self.strip_frac > 0.0 && self.strip_frac < 1.0) {
            return fail(format!("strip_frac {} outside (0,1)", self.strip_frac));
        }
        if self.strip_height() % self.latent_factor != 0 {
            return fail(format!(
                "strip height {} not divisible by latent factor {}",
                self.strip_height(),
                self.latent_factor
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn latent_h(&self) -> usize {
        self.height / self.latent_factor
    }

    pub fn latent_w(&self) -> usize {
        self.width / self.latent_factor
    }

    /// Height in pixels of the in-context reference strip.
    pub fn strip_height(&self) -> usize {
        let h = (self.height as f64 * self.strip_frac).round() as usize;
        // Keep the canvas codec-compatible.
        let f = self.latent_factor;
        ((h + f - 1) / f) * f
    }

    /// Canvas height with the in-context strip appended.
    pub fn canvas_height(&self) -> usize {
        self.height + self.strip_height()
    }

    pub fn alphabet(&self) -> Result<Alphabet> {
        match &self.alphabet_file {
            None => Ok(Alphabet::default_latin()),
            Some(path) => Alphabet::from_lines(&std::fs::read_to_string(path)?),
        }
    }

    pub fn layout_params(&self) -> LayoutParams {
        LayoutParams {
            threshold: self.attn_threshold,
            blur_kernel: self.blur_kernel,
            blur_sigma: self.blur_sigma,
            box_threshold: self.box_threshold,
        }
    }

    pub fn crop_params(&self) -> AdaptiveCropParams {
        AdaptiveCropParams {
            char_threshold: self.char_threshold,
            expand_ratio: self.expand_ratio,
        }
    }

    /// Hash of the canonical serialized form; two configs share a hash
    /// iff every field matches.
    pub fn content_hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }

    /// First 12 hex digits of [`content_hash`](Self::content_hash), used
    /// in run directory names.
    pub fn short_hash(&self) -> String {
        self.content_hash()[..12].to_string()
    }
}
