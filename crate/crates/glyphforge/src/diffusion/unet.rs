//! The conditional denoiser: a three-stage convolutional
//! encoder–decoder over the latent with timestep embeddings,
//! self-attention at the two coarser stages and text cross-attention
//! at every stage. Cross-attention layers report their attention
//! probabilities for layout supervision and accept the style adapter
//! branch.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Linear};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::glyph::MaskImage;
use crate::nn::{conv2d, conv2d_zero, group_norm, linear, Init, ParamStore};
use crate::rngutil::RngStream;
use crate::style::{inject_style, StyleAdapter};

/// Checkpoint `kind` string for denoiser parameter blobs.
pub const DENOISER_KIND: &str = "denoiser";

/// One cross-attention layer's probabilities, kept attached to the
/// graph so layout losses can backpropagate through them.
#[derive(Debug, Clone)]
pub struct AttnCapture {
    pub layer_id: usize,
    /// Query grid height at this layer.
    pub h: usize,
    /// Query grid width at this layer.
    pub w: usize,
    /// Head-averaged probabilities `[B, h·w, K]`.
    pub probs: Tensor,
}

#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps: Tensor,
    /// One capture per cross-attention layer, forward order.
    pub captures: Vec<AttnCapture>,
}

/// Style injection inputs for one forward pass: tokens, one adapter
/// per cross-attention layer and one query mask per layer.
pub struct StyleContext<'a> {
    /// `[B, N_s, D_s]` style tokens.
    pub tokens: &'a Tensor,
    pub adapters: &'a [StyleAdapter],
    /// Per-layer `[B, n_q]` binary query masks.
    pub masks: &'a [Tensor],
}

fn linear_zero(
    store: &mut ParamStore,
    rng: &mut RngStream,
    name: &str,
    in_d: usize,
    out_d: usize,
) -> Result<Linear> {
    let w = store.var(&format!("{name}.weight"), &[out_d, in_d], Init::Zeros, rng)?;
    let b = store.var(&format!("{name}.bias"), &[out_d], Init::Zeros, rng)?;
    Ok(Linear::new(w, Some(b)))
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore,
        rng: &mut RngStream,
        name: &str,
        in_c: usize,
        out_c: usize,
        temb_dim: usize,
    ) -> Result<Self> {
        let pad1 = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        Ok(ResBlock {
            norm1: group_norm(store, rng, &format!("{name}.norm1"), in_c, 8)?,
            conv1: conv2d(store, rng, &format!("{name}.conv1"), in_c, out_c, 3, pad1)?,
            temb_proj: linear(store, rng, &format!("{name}.temb"), temb_dim, out_c)?,
            norm2: group_norm(store, rng, &format!("{name}.norm2"), out_c, 8)?,
            conv2: conv2d_zero(store, rng, &format!("{name}.conv2"), out_c, out_c, 3, pad1)?,
            skip: if in_c == out_c {
                None
            } else {
                let id = Conv2dConfig::default();
                Some(conv2d(store, rng, &format!("{name}.skip"), in_c, out_c, 1, id)?)
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let scale = self
            .temb_proj
            .forward(&temb.silu()?)?
            .unsqueeze(2)?
            .unsqueeze(3)?;
        let h = h.broadcast_add(&scale)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

fn split_heads(t: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, c) = t.dims3()?;
    Ok(t.reshape((b, n, heads, c / heads))?
        .transpose(1, 2)?
        .contiguous()?)
}

fn merge_heads(t: &Tensor) -> Result<Tensor> {
    let (b, h, n, d) = t.dims4()?;
    Ok(t.transpose(1, 2)?.reshape((b, n, h * d))?)
}

struct SelfAttn {
    norm: GroupNorm,
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl SelfAttn {
    fn new(
        store: &mut ParamStore,
        rng: &mut RngStream,
        name: &str,
        ch: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(SelfAttn {
            norm: group_norm(store, rng, &format!("{name}.norm"), ch, 8)?,
            qkv: linear(store, rng, &format!("{name}.qkv"), ch, ch * 3)?,
            proj: linear_zero(store, rng, &format!("{name}.proj"), ch, ch)?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let flat = self
            .norm
            .forward(x)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let qkv = self.qkv.forward(&flat)?;
        let q = split_heads(&qkv.narrow(2, 0, c)?.contiguous()?, self.heads)?;
        let k = split_heads(&qkv.narrow(2, c, c)?.contiguous()?, self.heads)?;
        let v = split_heads(&qkv.narrow(2, 2 * c, c)?.contiguous()?, self.heads)?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let probs = candle_nn::ops::softmax(&(q.matmul(&k.t()?)? * scale)?, 3)?;
        let out = merge_heads(&probs.matmul(&v)?)?;
        let out = self
            .proj
            .forward(&out)?
            .transpose(1, 2)?
            .reshape((b, c, h, w))?;
        Ok((x + out)?)
    }
}

struct CrossAttn {
    layer_id: usize,
    norm: GroupNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    proj: Linear,
    heads: usize,
}

impl CrossAttn {
    fn new(
        store: &mut ParamStore,
        rng: &mut RngStream,
        name: &str,
        layer_id: usize,
        ch: usize,
        d_text: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(CrossAttn {
            layer_id,
            norm: group_norm(store, rng, &format!("{name}.norm"), ch, 8)?,
            to_q: linear(store, rng, &format!("{name}.to_q"), ch, ch)?,
            to_k: linear(store, rng, &format!("{name}.to_k"), d_text, ch)?,
            to_v: linear(store, rng, &format!("{name}.to_v"), d_text, ch)?,
            proj: linear_zero(store, rng, &format!("{name}.proj"), ch, ch)?,
            heads,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        cond: &Tensor,
        style: Option<(&StyleAdapter, &Tensor, &Tensor)>,
        captures: &mut Vec<AttnCapture>,
    ) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let flat = self
            .norm
            .forward(x)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let q = split_heads(&self.to_q.forward(&flat)?, self.heads)?;
        let k = split_heads(&self.to_k.forward(cond)?, self.heads)?;
        let v = split_heads(&self.to_v.forward(cond)?, self.heads)?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let probs = candle_nn::ops::softmax(&(q.matmul(&k.t()?)? * scale)?, 3)?;
        captures.push(AttnCapture {
            layer_id: self.layer_id,
            h,
            w,
            probs: probs.mean(1)?,
        });
        let text_out = merge_heads(&probs.matmul(&v)?)?;
        let merged = match style {
            Some((adapter, mask, tokens)) => inject_style(&text_out, &q, tokens, mask, adapter)?,
            None => text_out,
        };
        let out = self
            .proj
            .forward(&merged)?
            .transpose(1, 2)?
            .reshape((b, c, h, w))?;
        Ok((x + out)?)
    }
}

/// The conditional noise predictor.
pub struct Denoiser {
    stem: Conv2d,
    temb1: Linear,
    temb2: Linear,
    enc0_res: ResBlock,
    enc0_cross: CrossAttn,
    down0: Conv2d,
    enc1_res: ResBlock,
    enc1_self: SelfAttn,
    enc1_cross: CrossAttn,
    down1: Conv2d,
    mid_res1: ResBlock,
    mid_self: SelfAttn,
    mid_cross: CrossAttn,
    mid_res2: ResBlock,
    up1: Conv2d,
    dec1_res: ResBlock,
    dec1_self: SelfAttn,
    dec1_cross: CrossAttn,
    up0: Conv2d,
    dec0_res: ResBlock,
    dec0_cross: CrossAttn,
    head_norm: GroupNorm,
    head: Conv2d,
    in_channels: usize,
    out_channels: usize,
    d_text: usize,
    temb_dim: usize,
}

impl Denoiser {
    /// Number of cross-attention layers (and thus style adapters and
    /// capture entries), in forward order 0..CROSS_LAYERS.
    pub const CROSS_LAYERS: usize = 5;

    pub fn new(
        store: &mut ParamStore,
        cfg: &RunConfig,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let ch = &cfg.unet_channels;
        if ch.len() != 3 {
            return Err(Error::Config("unet_channels must list three stages".into()));
        }
        for &c in ch {
            if c % 8 != 0 || c % cfg.unet_heads != 0 {
                return Err(Error::Config(format!(
                    "stage width {c} must be divisible by 8 and by {} heads",
                    cfg.unet_heads
                )));
            }
        }
        let heads = cfg.unet_heads;
        let d_text = cfg.d_model;
        let temb_dim = 4 * ch[0];
        let mut rng = RngStream::derive(cfg.seed, "denoiser-init", 0);
        let r = &mut rng;
        let pad1 = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        Ok(Denoiser {
            stem: conv2d(store, r, "denoiser.stem", in_channels, ch[0], 3, pad1)?,
            temb1: linear(store, r, "denoiser.temb1", ch[0] * 2, temb_dim)?,
            temb2: linear(store, r, "denoiser.temb2", temb_dim, temb_dim)?,
            enc0_res: ResBlock::new(store, r, "denoiser.enc0.res", ch[0], ch[0], temb_dim)?,
            enc0_cross: CrossAttn::new(store, r, "denoiser.enc0.cross", 0, ch[0], d_text, heads)?,
            down0: conv2d(store, r, "denoiser.down0", ch[0], ch[1], 3, pad1)?,
            enc1_res: ResBlock::new(store, r, "denoiser.enc1.res", ch[1], ch[1], temb_dim)?,
            enc1_self: SelfAttn::new(store, r, "denoiser.enc1.self", ch[1], heads)?,
            enc1_cross: CrossAttn::new(store, r, "denoiser.enc1.cross", 1, ch[1], d_text, heads)?,
            down1: conv2d(store, r, "denoiser.down1", ch[1], ch[2], 3, pad1)?,
            mid_res1: ResBlock::new(store, r, "denoiser.mid.res1", ch[2], ch[2], temb_dim)?,
            mid_self: SelfAttn::new(store, r, "denoiser.mid.self", ch[2], heads)?,
            mid_cross: CrossAttn::new(store, r, "denoiser.mid.cross", 2, ch[2], d_text, heads)?,
            mid_res2: ResBlock::new(store, r, "denoiser.mid.res2", ch[2], ch[2], temb_dim)?,
            up1: conv2d(store, r, "denoiser.up1", ch[2], ch[1], 3, pad1)?,
            dec1_res: ResBlock::new(store, r, "denoiser.dec1.res", ch[1] * 2, ch[1], temb_dim)?,
            dec1_self: SelfAttn::new(store, r, "denoiser.dec1.self", ch[1], heads)?,
            dec1_cross: CrossAttn::new(store, r, "denoiser.dec1.cross", 3, ch[1], d_text, heads)?,
            up0: conv2d(store, r, "denoiser.up0", ch[1], ch[0], 3, pad1)?,
            dec0_res: ResBlock::new(store, r, "denoiser.dec0.res", ch[0] * 2, ch[0], temb_dim)?,
            dec0_cross: CrossAttn::new(store, r, "denoiser.dec0.cross", 4, ch[0], d_text, heads)?,
            head_norm: group_norm(store, r, "denoiser.head_norm", ch[0], 8)?,
            head: conv2d_zero(store, r, "denoiser.head", ch[0], out_channels, 3, pad1)?,
            in_channels,
            out_channels,
            d_text,
            temb_dim,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Query grid dimensions of each cross-attention layer for a
    /// latent of `(h, w)` cells, forward order.
    pub fn level_dims(h: usize, w: usize) -> [(usize, usize); Self::CROSS_LAYERS] {
        let c = |n: usize| n.div_ceil(2);
        let (h1, w1) = (c(h), c(w));
        let (h2, w2) = (c(h1), c(w1));
        [(h, w), (h1, w1), (h2, w2), (h1, w1), (h, w)]
    }

    fn timestep_embedding(&self, ts: &[usize], device: &candle_core::Device) -> Result<Tensor> {
        let half = self.temb_dim / 4;
        let mut data = Vec::with_capacity(ts.len() * half * 2);
        for &t in ts {
            for i in 0..half {
                let freq = (-(10000.0f64.ln()) * i as f64 / (half - 1) as f64).exp();
                data.push((t as f64 * freq).sin() as f32);
            }
            for i in 0..half {
                let freq = (-(10000.0f64.ln()) * i as f64 / (half - 1) as f64).exp();
                data.push((t as f64 * freq).cos() as f32);
            }
        }
        let emb = Tensor::from_vec(data, &[ts.len(), half * 2], device)?;
        Ok(self.temb2.forward(&self.temb1.forward(&emb)?.silu()?)?)
    }

    fn crop_to(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        Ok(t.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }

    /// Halves both spatial dims (ceil): stride-1 conv, zero-pad odd
    /// extents to even, then 2×2 mean pooling. Stride-2 convolutions
    /// are avoided deliberately — their input gradient is only exact
    /// when height and width agree on `(n − 1) mod 2`, which mixed
    /// odd/even latents (strip-extended canvases) violate.
    fn downsample(conv: &Conv2d, x: &Tensor) -> Result<Tensor> {
        let y = conv.forward(x)?;
        let (_b, _c, h, w) = y.dims4()?;
        let y = if h % 2 == 1 { y.pad_with_zeros(2, 0, 1)? } else { y };
        let y = if w % 2 == 1 { y.pad_with_zeros(3, 0, 1)? } else { y };
        Ok(y.avg_pool2d(2)?)
    }

    fn style_at<'a>(
        style: Option<&'a StyleContext<'a>>,
        i: usize,
    ) -> Option<(&'a StyleAdapter, &'a Tensor, &'a Tensor)> {
        style.map(|s| (&s.adapters[i], &s.masks[i], s.tokens))
    }

    /// Predicts the noise for `x = [ẑ_t ; z_Im ; m′ ; l_g]` at
    /// per-sample timesteps `ts` under text condition
    /// `cond = [B, K, D]`, optionally with the style branch.
    pub fn forward(
        &self,
        x: &Tensor,
        ts: &[usize],
        cond: &Tensor,
        style: Option<&StyleContext>,
    ) -> Result<DenoiserOutput> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::invalid(format!(
                "denoiser input has {c} channels, expected {}",
                self.in_channels
            )));
        }
        if ts.len() != b {
            return Err(Error::invalid(format!(
                "{} timesteps for a batch of {b}",
                ts.len()
            )));
        }
        let (cb, _k, cd) = cond.dims3()?;
        if cb != b || cd != self.d_text {
            return Err(Error::invalid(format!(
                "text condition {:?} incompatible with batch {b} and width {}",
                cond.dims(),
                self.d_text
            )));
        }
        if let Some(s) = style {
            if s.adapters.len() != Self::CROSS_LAYERS || s.masks.len() != Self::CROSS_LAYERS {
                return Err(Error::invalid(format!(
                    "style context needs {} adapters and masks, got {} and {}",
                    Self::CROSS_LAYERS,
                    s.adapters.len(),
                    s.masks.len()
                )));
            }
        }
        let temb = self.timestep_embedding(ts, x.device())?;
        let mut captures = Vec::with_capacity(Self::CROSS_LAYERS);
        let cap = &mut captures;

        let h0 = self.stem.forward(x)?;
        let h0 = self.enc0_res.forward(&h0, &temb)?;
        let h0 = self
            .enc0_cross
            .forward(&h0, cond, Self::style_at(style, 0), cap)?;

        let h1 = Self::downsample(&self.down0, &h0)?;
        let h1 = self.enc1_res.forward(&h1, &temb)?;
        let h1 = self.enc1_self.forward(&h1)?;
        let h1 = self
            .enc1_cross
            .forward(&h1, cond, Self::style_at(style, 1), cap)?;

        let h2 = Self::downsample(&self.down1, &h1)?;
        let h2 = self.mid_res1.forward(&h2, &temb)?;
        let h2 = self.mid_self.forward(&h2)?;
        let h2 = self
            .mid_cross
            .forward(&h2, cond, Self::style_at(style, 2), cap)?;
        let h2 = self.mid_res2.forward(&h2, &temb)?;

        let (_, _, h1h, h1w) = h1.dims4()?;
        let (_, _, h2h, h2w) = h2.dims4()?;
        let u1 = h2.upsample_nearest2d(h2h * 2, h2w * 2)?;
        let u1 = Self::crop_to(&u1, h1h, h1w)?;
        let u1 = self.up1.forward(&u1)?;
        let u1 = Tensor::cat(&[&u1, &h1], 1)?;
        let u1 = self.dec1_res.forward(&u1, &temb)?;
        let u1 = self.dec1_self.forward(&u1)?;
        let u1 = self
            .dec1_cross
            .forward(&u1, cond, Self::style_at(style, 3), cap)?;

        let u0 = u1.upsample_nearest2d(h1h * 2, h1w * 2)?;
        let u0 = Self::crop_to(&u0, h, w)?;
        let u0 = self.up0.forward(&u0)?;
        let u0 = Tensor::cat(&[&u0, &h0], 1)?;
        let u0 = self.dec0_res.forward(&u0, &temb)?;
        let u0 = self
            .dec0_cross
            .forward(&u0, cond, Self::style_at(style, 4), cap)?;

        let eps = self.head.forward(&self.head_norm.forward(&u0)?.silu()?)?;
        Ok(DenoiserOutput { eps, captures })
    }
}

/// Builds the per-layer query masks for style injection: one binary
/// `[B, n_q]` row per cross-attention layer, where a query cell is 1
/// iff its pixel footprint intersects the sample's mask region.
pub fn style_query_masks(
    masks: &[MaskImage],
    latent_hw: (usize, usize),
    device: &candle_core::Device,
) -> Result<Vec<Tensor>> {
    if masks.is_empty() {
        return Err(Error::invalid("no masks given"));
    }
    let (ph, pw) = (masks[0].height, masks[0].width);
    for m in masks {
        if (m.height, m.width) != (ph, pw) {
            return Err(Error::invalid("masks disagree on canvas size"));
        }
    }
    let mut out = Vec::with_capacity(Denoiser::CROSS_LAYERS);
    for (lh, lw) in Denoiser::level_dims(latent_hw.0, latent_hw.1) {
        let mut data = vec![0.0f32; masks.len() * lh * lw];
        for (bi, m) in masks.iter().enumerate() {
            let r = &m.region;
            for y in 0..lh {
                let y0 = (y * ph) / lh;
                let y1 = ((y + 1) * ph).div_ceil(lh);
                for x in 0..lw {
                    let x0 = (x * pw) / lw;
                    let x1 = ((x + 1) * pw).div_ceil(lw);
                    let hit = (r.x0 as usize) < x1
                        && x0 < r.x1.max(0) as usize
                        && (r.y0 as usize) < y1
                        && y0 < r.y1.max(0) as usize;
                    if hit {
                        data[bi * lh * lw + y * lw + x] = 1.0;
                    }
                }
            }
        }
        out.push(Tensor::from_vec(data, &[masks.len(), lh * lw], device)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use crate::glyph::BBox;

    fn dev() -> Device {
        Device::Cpu
    }

    fn build() -> (ParamStore, Denoiser, RunConfig) {
        let cfg = RunConfig::default();
        let mut store = ParamStore::new(dev());
        let model = Denoiser::new(&mut store, &cfg, 10, 3).unwrap();
        (store, model, cfg)
    }

    fn zeros(dims: &[usize]) -> Tensor {
        Tensor::zeros(dims, candle_core::DType::F32, &dev()).unwrap()
    }

    fn to_vec(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn init_forward_is_finite_and_shaped_under_zero_conditioning() {
        let (_store, model, _cfg) = build();
        let out = model
            .forward(&zeros(&[2, 10, 16, 64]), &[0, 99], &zeros(&[2, 16, 96]), None)
            .unwrap();
        assert_eq!(out.eps.dims(), &[2, 3, 16, 64]);
        assert!(to_vec(&out.eps).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn captures_come_back_in_forward_order_with_normalized_rows() {
        let (_store, model, _cfg) = build();
        let out = model
            .forward(&zeros(&[1, 10, 16, 64]), &[50], &zeros(&[1, 16, 96]), None)
            .unwrap();
        let ids: Vec<usize> = out.captures.iter().map(|c| c.layer_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        let dims: Vec<(usize, usize)> = out.captures.iter().map(|c| (c.h, c.w)).collect();
        assert_eq!(dims, Denoiser::level_dims(16, 64).to_vec());
        for c in &out.captures {
            assert_eq!(c.probs.dims(), &[1, c.h * c.w, 16]);
            let sums: Vec<f32> = to_vec(&c.probs.sum(2).unwrap());
            for s in sums {
                assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
            }
        }
    }

    #[test]
    fn odd_canvas_height_round_trips_through_the_decoder() {
        let (_store, model, _cfg) = build();
        let out = model
            .forward(&zeros(&[1, 10, 18, 64]), &[3], &zeros(&[1, 16, 96]), None)
            .unwrap();
        assert_eq!(out.eps.dims(), &[1, 3, 18, 64]);
        assert_eq!(Denoiser::level_dims(18, 64)[2], (5, 16));
        assert_eq!(out.captures[2].probs.dims(), &[1, 80, 16]);
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let (_store, model, _cfg) = build();
        let cond = zeros(&[1, 16, 96]);
        assert!(model
            .forward(&zeros(&[1, 9, 16, 64]), &[0], &cond, None)
            .is_err());
        assert!(model
            .forward(&zeros(&[1, 10, 16, 64]), &[0, 1], &cond, None)
            .is_err());
        assert!(model
            .forward(&zeros(&[1, 10, 16, 64]), &[0], &zeros(&[1, 16, 95]), None)
            .is_err());
    }

    fn scrambled() -> (ParamStore, Denoiser, RunConfig) {
        let (store, model, cfg) = build();
        store.scramble(77).unwrap();
        (store, model, cfg)
    }

    #[test]
    fn glyph_mask_and_timestep_inputs_all_reach_the_output() {
        let (_store, model, _cfg) = scrambled();
        let mut rng = RngStream::new(21);
        let base = rng.normal_tensor(&[1, 10, 16, 64], &dev()).unwrap();
        let cond = rng.normal_tensor(&[1, 16, 96], &dev()).unwrap();
        let out0 = to_vec(&model.forward(&base, &[10], &cond, None).unwrap().eps);

        // Perturb the glyph stream (channels 7..10).
        let bump = rng.normal_tensor(&[1, 3, 16, 64], &dev()).unwrap();
        let glyph = (base.narrow(1, 7, 3).unwrap() + &bump).unwrap();
        let x = Tensor::cat(&[base.narrow(1, 0, 7).unwrap(), glyph], 1).unwrap();
        assert_ne!(out0, to_vec(&model.forward(&x, &[10], &cond, None).unwrap().eps));

        // Perturb the mask stream (channel 6).
        let m = (base.narrow(1, 6, 1).unwrap() + 0.5).unwrap();
        let x = Tensor::cat(
            &[
                base.narrow(1, 0, 6).unwrap(),
                m,
                base.narrow(1, 7, 3).unwrap(),
            ],
            1,
        )
        .unwrap();
        assert_ne!(out0, to_vec(&model.forward(&x, &[10], &cond, None).unwrap().eps));

        // Perturb the timestep and the text condition.
        assert_ne!(out0, to_vec(&model.forward(&base, &[90], &cond, None).unwrap().eps));
        let cond2 = rng.normal_tensor(&[1, 16, 96], &dev()).unwrap();
        assert_ne!(out0, to_vec(&model.forward(&base, &[10], &cond2, None).unwrap().eps));

        // Same inputs replay bit-identically.
        assert_eq!(out0, to_vec(&model.forward(&base, &[10], &cond, None).unwrap().eps));
    }

    fn style_fixture(
        store: &mut ParamStore,
        cfg: &RunConfig,
    ) -> (Vec<StyleAdapter>, Tensor, Vec<Tensor>) {
        let mut rng = RngStream::new(31);
        let ch = &cfg.unet_channels;
        let widths = [ch[0], ch[1], ch[2], ch[1], ch[0]];
        let adapters: Vec<StyleAdapter> = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                StyleAdapter::new(store, &mut rng, &format!("style_adapter.l{i}"), 96, c, 4)
                    .unwrap()
            })
            .collect();
        let tokens = rng.normal_tensor(&[1, 4, 96], &dev()).unwrap();
        let masks = Denoiser::level_dims(16, 64)
            .iter()
            .map(|&(h, w)| Tensor::ones(&[1, h * w], candle_core::DType::F32, &dev()).unwrap())
            .collect();
        (adapters, tokens, masks)
    }

    #[test]
    fn adapter_order_matches_level_widths() {
        // Layer order 0..5 maps to widths [48, 96, 144, 96, 48]; the
        // fixture builds adapters level-major, so verify the zip.
        let cfg = RunConfig::default();
        let mut store = ParamStore::new(dev());
        let (adapters, _, masks) = style_fixture(&mut store, &cfg);
        assert_eq!(adapters.len(), Denoiser::CROSS_LAYERS);
        assert_eq!(masks.len(), Denoiser::CROSS_LAYERS);
    }

    #[test]
    fn zero_style_mask_forward_equals_styleless_forward() {
        let (store, model, cfg) = scrambled();
        let mut store2 = ParamStore::new(dev());
        let (adapters, tokens, _) = style_fixture(&mut store2, &cfg);
        for v in store2.vars_matching(|n| n.ends_with(".gate")) {
            v.set(&Tensor::from_vec(vec![0.9f32], &[1], &dev()).unwrap())
                .unwrap();
        }
        let masks: Vec<Tensor> = Denoiser::level_dims(16, 64)
            .iter()
            .map(|&(h, w)| zeros(&[1, h * w]))
            .collect();
        let mut rng = RngStream::new(33);
        let x = rng.normal_tensor(&[1, 10, 16, 64], &dev()).unwrap();
        let cond = rng.normal_tensor(&[1, 16, 96], &dev()).unwrap();
        let plain = model.forward(&x, &[40], &cond, None).unwrap();
        let ctx = StyleContext {
            tokens: &tokens,
            adapters: &adapters,
            masks: &masks,
        };
        let styled = model.forward(&x, &[40], &cond, Some(&ctx)).unwrap();
        assert_eq!(to_vec(&plain.eps), to_vec(&styled.eps));
        let _ = store;
    }

    #[test]
    fn zero_gate_forward_equals_styleless_forward() {
        let (store, model, cfg) = scrambled();
        let mut store2 = ParamStore::new(dev());
        let (adapters, tokens, masks) = style_fixture(&mut store2, &cfg);
        let mut rng = RngStream::new(34);
        let x = rng.normal_tensor(&[1, 10, 16, 64], &dev()).unwrap();
        let cond = rng.normal_tensor(&[1, 16, 96], &dev()).unwrap();
        let plain = model.forward(&x, &[7], &cond, None).unwrap();
        let ctx = StyleContext {
            tokens: &tokens,
            adapters: &adapters,
            masks: &masks,
        };
        let styled = model.forward(&x, &[7], &cond, Some(&ctx)).unwrap();
        assert_eq!(to_vec(&plain.eps), to_vec(&styled.eps));
        let _ = store;
    }

    #[test]
    fn open_gate_with_full_mask_changes_the_output() {
        let (store, model, cfg) = scrambled();
        let mut store2 = ParamStore::new(dev());
        let (adapters, tokens, masks) = style_fixture(&mut store2, &cfg);
        store2.scramble(35).unwrap();
        for v in store2.vars_matching(|n| n.ends_with(".gate")) {
            v.set(&Tensor::from_vec(vec![1.0f32], &[1], &dev()).unwrap())
                .unwrap();
        }
        let mut rng = RngStream::new(36);
        let x = rng.normal_tensor(&[1, 10, 16, 64], &dev()).unwrap();
        let cond = rng.normal_tensor(&[1, 16, 96], &dev()).unwrap();
        let plain = model.forward(&x, &[7], &cond, None).unwrap();
        let ctx = StyleContext {
            tokens: &tokens,
            adapters: &adapters,
            masks: &masks,
        };
        let styled = model.forward(&x, &[7], &cond, Some(&ctx)).unwrap();
        assert_ne!(to_vec(&plain.eps), to_vec(&styled.eps));
        let _ = store;
    }

    #[test]
    fn query_masks_cover_exactly_the_intersecting_cells() {
        let mask = MaskImage::new(64, 256, BBox::new(16, 8, 48, 24).unwrap()).unwrap();
        let levels = style_query_masks(&[mask], (16, 64), &dev()).unwrap();
        assert_eq!(levels.len(), 5);
        // Level 0: 16x64 cells of 4x4 pixels; region x in [16,48) →
        // cells 4..12, y in [8,24) → cells 2..6.
        let l0: Vec<f32> = to_vec(&levels[0]);
        for y in 0..16usize {
            for x in 0..64usize {
                let want = (4..12).contains(&x) && (2..6).contains(&y);
                assert_eq!(l0[y * 64 + x] > 0.5, want, "cell ({x},{y})");
            }
        }
        let count1: f32 = to_vec(&levels[1]).iter().sum();
        assert!(count1 > 0.0);
    }

    #[test]
    fn parameter_count_is_desk_scale() {
        let (store, _model, _cfg) = build();
        let n = store.param_count();
        assert!(
            (1_000_000..10_000_000).contains(&n),
            "denoiser has {n} parameters"
        );
    }
}
