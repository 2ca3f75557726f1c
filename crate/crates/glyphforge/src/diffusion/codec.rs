//! The pixel/latent codec: a deterministic resample codec (exact,
//! training-free) and a trained tiny autoencoder, selected by config.

use candle_core::{Device, Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Optimizer};

use crate::config::{CodecKind, RunConfig};
use crate::data::generate_sample;
use crate::diffusion::image_to_signed;
use crate::error::{Error, Result};
use crate::nn::{conv2d, group_norm, ParamStore};
use crate::perception::resize_bilinear;
use crate::rngutil::{derive_seed, RngStream};

/// Checkpoint `kind` string for trained codec blobs.
pub const CODEC_KIND: &str = "codec";

/// Latent channel count of the trained autoencoder.
pub const TRAINED_LATENT_CHANNELS: usize = 4;

struct EncStage {
    conv: Conv2d,
    norm: GroupNorm,
}

impl EncStage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.silu()?)
    }
}

/// Tiny convolutional autoencoder, spatial factor 4, latent C = 4.
pub struct Autoencoder {
    enc0: EncStage,
    enc1: EncStage,
    enc_out: Conv2d,
    dec0: EncStage,
    dec1: EncStage,
    dec_out: Conv2d,
}

impl Autoencoder {
    pub fn new(store: &mut ParamStore, seed: u64) -> Result<Self> {
        let mut rng = RngStream::derive(seed, "codec-init", 0);
        let stride2 = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let stride1 = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let stage = |store: &mut ParamStore, rng: &mut RngStream, name: &str, i, o, cfg| {
            Ok::<EncStage, Error>(EncStage {
                conv: conv2d(store, rng, &format!("codec.{name}.conv"), i, o, 3, cfg)?,
                norm: group_norm(store, rng, &format!("codec.{name}.norm"), o, 8)?,
            })
        };
        Ok(Autoencoder {
            enc0: stage(store, &mut rng, "enc0", 3, 32, stride2)?,
            enc1: stage(store, &mut rng, "enc1", 32, 64, stride2)?,
            enc_out: conv2d(
                store,
                &mut rng,
                "codec.enc_out",
                64,
                TRAINED_LATENT_CHANNELS,
                3,
                stride1,
            )?,
            dec0: stage(store, &mut rng, "dec0", TRAINED_LATENT_CHANNELS, 64, stride1)?,
            dec1: stage(store, &mut rng, "dec1", 64, 32, stride1)?,
            dec_out: conv2d(store, &mut rng, "codec.dec_out", 32, 3, 3, stride1)?,
        })
    }

    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.enc0.forward(x)?;
        let h = self.enc1.forward(&h)?;
        Ok(self.enc_out.forward(&h)?)
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let (_b, _c, h, w) = z.dims4()?;
        let x = self.dec0.forward(z)?;
        let x = x.upsample_nearest2d(h * 2, w * 2)?;
        let x = self.dec1.forward(&x)?;
        let x = x.upsample_nearest2d(h * 4, w * 4)?;
        Ok(self.dec_out.forward(&x)?)
    }
}

/// Pixel/latent codec over signed `[B, 3, H, W]` images in [−1, 1].
pub enum Codec {
    /// Area-downsample encode, bilinear-upsample decode. Exact and
    /// deterministic; latent C = 3.
    Identity { factor: usize },
    Trained { ae: Autoencoder, factor: usize },
}

impl Codec {
    pub fn identity(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config("latent factor must be positive".into()));
        }
        Ok(Codec::Identity { factor })
    }

    /// Builds the trained codec over `store`, creating parameters when
    /// absent and adopting checkpointed ones when present.
    pub fn trained(store: &mut ParamStore, cfg: &RunConfig) -> Result<Self> {
        if cfg.latent_factor != 4 {
            return Err(Error::Config(format!(
                "trained codec is built for factor 4, config says {}",
                cfg.latent_factor
            )));
        }
        Ok(Codec::Trained {
            ae: Autoencoder::new(store, cfg.seed)?,
            factor: 4,
        })
    }

    /// The codec selected by `cfg.codec`, with trained parameters on
    /// `store` when applicable.
    pub fn from_config(store: &mut ParamStore, cfg: &RunConfig) -> Result<Self> {
        match cfg.codec {
            CodecKind::Identity => Self::identity(cfg.latent_factor),
            CodecKind::Trained => Self::trained(store, cfg),
        }
    }

    pub fn factor(&self) -> usize {
        match self {
            Codec::Identity { factor } => *factor,
            Codec::Trained { factor, .. } => *factor,
        }
    }

    pub fn latent_channels(&self) -> usize {
        match self {
            Codec::Identity { .. } => 3,
            Codec::Trained { .. } => TRAINED_LATENT_CHANNELS,
        }
    }

    fn check_encode_input(&self, x: &Tensor) -> Result<()> {
        let (_b, c, h, w) = x.dims4()?;
        let f = self.factor();
        if c != 3 {
            return Err(Error::invalid(format!("codec expects 3 channels, got {c}")));
        }
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "resolution {h}x{w} not divisible by latent factor {f}"
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_encode_input(x)?;
        match self {
            Codec::Identity { factor } => Ok(x.avg_pool2d(*factor)?),
            Codec::Trained { ae, .. } => ae.encode(x),
        }
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let (_b, c, h, w) = z.dims4()?;
        if c != self.latent_channels() {
            return Err(Error::invalid(format!(
                "latent has {c} channels, codec expects {}",
                self.latent_channels()
            )));
        }
        match self {
            Codec::Identity { factor } => resize_bilinear(z, h * factor, w * factor),
            Codec::Trained { ae, .. } => ae.decode(z),
        }
    }
}

/// Peak signal-to-noise ratio in dB between two same-shape tensors
/// whose values span `peak`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "psnr shapes {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mse: f32 = (a - b)?.sqr()?.mean_all()?.to_scalar()?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse as f64).log10())
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CodecReport {
    pub steps: usize,
    pub final_loss: f64,
    /// Reconstruction PSNR (dB, [0,1] scale) on held-out synthetic
    /// images.
    pub holdout_psnr: f64,
}

fn synth_batch(cfg: &RunConfig, role: &str, index: u64, n: usize, dev: &Device) -> Result<Tensor> {
    let mut imgs = Vec::with_capacity(n);
    for i in 0..n {
        let seed = derive_seed(cfg.seed, role, index * n as u64 + i as u64);
        let sample = generate_sample(seed, cfg, None)?;
        imgs.push(image_to_signed(&sample.image, dev)?);
    }
    Ok(Tensor::cat(&imgs, 0)?)
}

/// Trains the tiny autoencoder on on-the-fly synthetic images and
/// reports held-out reconstruction PSNR. The caller owns the returned
/// store (e.g. for checkpointing).
pub fn train_codec(cfg: &RunConfig, steps: usize, device: &Device) -> Result<(ParamStore, CodecReport)> {
    let mut store = ParamStore::new(device.clone());
    let codec = Codec::trained(&mut store, cfg)?;
    let params = candle_nn::ParamsAdamW {
        lr: 1e-3,
        ..Default::default()
    };
    let mut opt = candle_nn::AdamW::new(store.all_vars(), params)?;
    let mut last = f64::NAN;
    for step in 0..steps {
        let x = synth_batch(cfg, "codec-data", step as u64, 4, device)?;
        let recon = codec.decode(&codec.encode(&x)?)?;
        let loss = (recon - &x)?.sqr()?.mean_all()?;
        last = loss.to_scalar::<f32>()? as f64;
        if !last.is_finite() {
            return Err(Error::Training(format!("non-finite codec loss at step {step}")));
        }
        opt.backward_step(&loss)?;
    }
    let holdout = synth_batch(cfg, "codec-holdout", 0, 16, device)?;
    let recon = codec.decode(&codec.encode(&holdout)?)?;
    // PSNR on the [0,1] pixel scale.
    let a = ((&holdout + 1.0)? * 0.5)?;
    let b = ((&recon + 1.0)? * 0.5)?.clamp(0.0, 1.0)?;
    let holdout_psnr = psnr(&a, &b, 1.0)?;
    Ok((
        store,
        CodecReport {
            steps,
            final_loss: last,
            holdout_psnr,
        },
    ))
}
