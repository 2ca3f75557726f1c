//! Latent diffusion inpainting: the pixel/latent codec, the noise
//! schedule, the conditional denoiser, the training loop and the
//! sampler.

pub mod codec;
pub mod sample;
pub mod schedule;
pub mod train;
pub mod unet;

pub use codec::{psnr, train_codec, Codec, CodecReport, CODEC_KIND};
pub use sample::{sample_edit, EditModel, EditOutput, StyleMode};
pub use schedule::NoiseSchedule;
pub use train::{
    prepare_batch, select_layers_for_batch, step_losses, token_maps_for_sample, train, LossReport,
    Phase, PreparedBatch, TrainContext, TrainOptions, TrainSummary,
};
pub use unet::{AttnCapture, Denoiser, DenoiserOutput, StyleContext, DENOISER_KIND};

use candle_core::{Device, Tensor};
use image::RgbImage;

use crate::error::{Error, Result};
use crate::glyph::MaskImage;
use crate::grid::Grid;

/// `[1, 3, H, W]` tensor in [−1, 1] from an RGB image.
pub fn image_to_signed(img: &RgbImage, device: &Device) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(data, &[1, 3, h, w], device)?)
}

/// RGB image from a `[1, 3, H, W]` tensor in [−1, 1], clamped and
/// rounded.
pub fn signed_to_image(t: &Tensor) -> Result<RgbImage> {
    let (b, c, h, w) = t.dims4()?;
    if b != 1 || c != 3 {
        return Err(Error::invalid(format!(
            "expected [1, 3, H, W], got {:?}",
            t.dims()
        )));
    }
    let data: Vec<f32> = t.flatten_all()?.to_vec1()?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = data[ch * h * w + y as usize * w + x as usize];
            p.0[ch] = (((v + 1.0) * 127.5).clamp(0.0, 255.0)).round() as u8;
        }
    }
    Ok(img)
}

/// `[1, 1, H, W]` binary tensor from a rectangular mask.
pub fn mask_to_tensor(mask: &MaskImage, device: &Device) -> Result<Tensor> {
    let g = mask.to_grid();
    grid_to_tensor(&g, device)
}

/// `[1, 1, H, W]` tensor from a grid.
pub fn grid_to_tensor(g: &Grid, device: &Device) -> Result<Tensor> {
    let mut data = vec![0.0f32; g.h * g.w];
    for y in 0..g.h {
        for x in 0..g.w {
            data[y * g.w + x] = g.get(x, y);
        }
    }
    Ok(Tensor::from_vec(data, &[1, 1, g.h, g.w], device)?)
}

/// The four denoiser input streams. Channel concatenation order is
/// fixed: `[ẑ_t ; z_Im ; m′ ; l_g]`.
#[derive(Debug, Clone)]
pub struct LatentBundle {
    pub noisy_latent: Tensor,
    pub masked_image_latent: Tensor,
    pub mask_down: Tensor,
    pub glyph_latent: Tensor,
}

impl LatentBundle {
    pub fn concat(&self) -> Result<Tensor> {
        let (b, _c, h, w) = self.noisy_latent.dims4()?;
        for (name, t, want_c) in [
            ("z_Im", &self.masked_image_latent, None),
            ("m'", &self.mask_down, Some(1)),
            ("l_g", &self.glyph_latent, None),
        ] {
            let (tb, tc, th, tw) = t.dims4()?;
            if (tb, th, tw) != (b, h, w) || want_c.is_some_and(|c| c != tc) {
                return Err(Error::invalid(format!(
                    "latent bundle stream {name} has shape {:?}, incompatible with \
                     noisy latent {:?}",
                    t.dims(),
                    self.noisy_latent.dims()
                )));
            }
        }
        Ok(Tensor::cat(
            &[
                &self.noisy_latent,
                &self.masked_image_latent,
                &self.mask_down,
                &self.glyph_latent,
            ],
            1,
        )?)
    }

    /// Total channel count of [`concat`](Self::concat).
    pub fn channels(latent_channels: usize) -> usize {
        3 * latent_channels + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyph::BBox;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn signed_round_trip_is_exact_on_u8() {
        let mut img = RgbImage::new(7, 5);
        for (i, p) in img.pixels_mut().enumerate() {
            *p = image::Rgb([(i * 13 % 256) as u8, (i * 7 % 256) as u8, 255 - (i % 256) as u8]);
        }
        let t = image_to_signed(&img, &dev()).unwrap();
        let back = signed_to_image(&t).unwrap();
        assert_eq!(img.as_raw(), back.as_raw());
    }

    #[test]
    fn bundle_concat_preserves_stream_order() {
        let b = LatentBundle {
            noisy_latent: Tensor::full(1.0f32, &[1, 3, 4, 4], &dev()).unwrap(),
            masked_image_latent: Tensor::full(2.0f32, &[1, 3, 4, 4], &dev()).unwrap(),
            mask_down: Tensor::full(3.0f32, &[1, 1, 4, 4], &dev()).unwrap(),
            glyph_latent: Tensor::full(4.0f32, &[1, 3, 4, 4], &dev()).unwrap(),
        };
        let x = b.concat().unwrap();
        assert_eq!(x.dims(), &[1, 10, 4, 4]);
        let got: Vec<f32> = x
            .mean(3)
            .unwrap()
            .mean(2)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert_eq!(got, vec![1., 1., 1., 2., 2., 2., 3., 4., 4., 4.]);
        assert_eq!(LatentBundle::channels(3), 10);
    }

    #[test]
    fn bundle_concat_rejects_mismatched_spatial_shape() {
        let b = LatentBundle {
            noisy_latent: Tensor::zeros(&[1, 3, 4, 4], candle_core::DType::F32, &dev()).unwrap(),
            masked_image_latent: Tensor::zeros(&[1, 3, 4, 5], candle_core::DType::F32, &dev())
                .unwrap(),
            mask_down: Tensor::zeros(&[1, 1, 4, 4], candle_core::DType::F32, &dev()).unwrap(),
            glyph_latent: Tensor::zeros(&[1, 3, 4, 4], candle_core::DType::F32, &dev()).unwrap(),
        };
        assert!(b.concat().is_err());
    }

    #[test]
    fn mask_tensor_matches_region() {
        let m = MaskImage::new(6, 8, BBox::new(2, 1, 5, 4).unwrap()).unwrap();
        let t = mask_to_tensor(&m, &dev()).unwrap();
        assert_eq!(t.dims(), &[1, 1, 6, 8]);
        let v: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        for y in 0..6usize {
            for x in 0..8usize {
                let want = if (2..5).contains(&x) && (1..4).contains(&y) {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(v[y * 8 + x], want);
            }
        }
    }
}
