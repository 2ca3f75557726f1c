//! The forward-process noise schedule: linear betas, cumulative
//! alpha-bar products, noising and training-noise draws.

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rngutil::RngStream;

/// Parameter name under which the schedule rides along in denoiser
/// checkpoints.
pub const SCHEDULE_PARAM: &str = "schedule.betas";

/// Per-step betas with precomputed cumulative products. `alpha_bar`
/// is strictly decreasing in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp over `t_steps` timesteps.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps < 2 {
            return Err(Error::Config(format!(
                "schedule needs at least 2 steps, got {t_steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_end > beta_start && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "invalid beta range [{beta_start}, {beta_end}]"
            )));
        }
        let betas = (0..t_steps)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (t_steps - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    /// Builds from explicit betas (e.g. restored from a checkpoint).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::Config("schedule needs at least 2 betas".into()));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for (t, &b) in betas.iter().enumerate() {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("beta[{t}] = {b} outside [0, 1)")));
            }
            prod *= 1.0 - b;
            if prod <= 0.0 {
                return Err(Error::Config(format!("alpha_bar[{t}] underflowed to {prod}")));
            }
            alpha_bar.push(prod);
        }
        for t in 1..alpha_bar.len() {
            if alpha_bar[t] >= alpha_bar[t - 1] {
                return Err(Error::Config(format!(
                    "alpha_bar not strictly decreasing at t={t}"
                )));
            }
        }
        Ok(NoiseSchedule { betas, alpha_bar })
    }

    pub fn t_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Stores the betas as a non-learned tensor so checkpoints carry
    /// the schedule.
    pub fn install(&self, store: &mut ParamStore) -> Result<()> {
        let t = Tensor::from_vec(
            self.betas.iter().map(|&b| b as f32).collect::<Vec<f32>>(),
            &[self.betas.len()],
            store.device(),
        )?;
        store.insert_raw(SCHEDULE_PARAM, &t)
    }

    /// Restores the schedule stored by [`install`](Self::install).
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let t = store
            .get(SCHEDULE_PARAM)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {SCHEDULE_PARAM}")))?;
        let betas: Vec<f32> = t.flatten_all()?.to_vec1()?;
        Self::from_betas(betas.into_iter().map(|b| b as f64).collect())
    }

    /// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·eps` for a single timestep.
    pub fn add_noise(&self, z0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        if t >= self.t_steps() {
            return Err(Error::invalid(format!(
                "timestep {t} out of range [0, {})",
                self.t_steps()
            )));
        }
        if z0.dims() != eps.dims() {
            return Err(Error::invalid(format!(
                "z0 shape {:?} does not match eps shape {:?}",
                z0.dims(),
                eps.dims()
            )));
        }
        let ab = self.alpha_bar[t];
        Ok(((z0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
    }

    /// Per-sample noising: `ts` gives one timestep per batch row.
    pub fn add_noise_batch(&self, z0: &Tensor, eps: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let (b, _c, _h, _w) = z0.dims4()?;
        if ts.len() != b {
            return Err(Error::invalid(format!(
                "{} timesteps for a batch of {b}",
                ts.len()
            )));
        }
        if z0.dims() != eps.dims() {
            return Err(Error::invalid(format!(
                "z0 shape {:?} does not match eps shape {:?}",
                z0.dims(),
                eps.dims()
            )));
        }
        let mut sa = Vec::with_capacity(b);
        let mut sb = Vec::with_capacity(b);
        for &t in ts {
            if t >= self.t_steps() {
                return Err(Error::invalid(format!(
                    "timestep {t} out of range [0, {})",
                    self.t_steps()
                )));
            }
            let ab = self.alpha_bar[t];
            sa.push(ab.sqrt() as f32);
            sb.push((1.0 - ab).sqrt() as f32);
        }
        let dev = z0.device();
        let sa = Tensor::from_vec(sa, &[b, 1, 1, 1], dev)?;
        let sb = Tensor::from_vec(sb, &[b, 1, 1, 1], dev)?;
        Ok((z0.broadcast_mul(&sa)? + eps.broadcast_mul(&sb)?)?)
    }

    /// Training noise: unit Gaussian plus `noise_offset` times a
    /// per-(sample, channel) constant Gaussian shared across the
    /// spatial extent.
    pub fn draw_training_noise(
        rng: &mut RngStream,
        shape: &[usize; 4],
        noise_offset: f64,
        device: &Device,
    ) -> Result<Tensor> {
        let eps = rng.normal_tensor(shape, device)?;
        if noise_offset == 0.0 {
            return Ok(eps);
        }
        let per_channel = rng.normal_tensor(&[shape[0], shape[1], 1, 1], device)?;
        Ok(eps.broadcast_add(&(per_channel * noise_offset)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::estimate_x0_latent;

    fn dev() -> Device {
        Device::Cpu
    }

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(100, 1e-3, 0.2).unwrap()
    }

    #[test]
    fn linear_schedule_is_strictly_decreasing_in_unit_interval() {
        let s = default_schedule();
        assert_eq!(s.t_steps(), 100);
        assert!(s.alpha_bar(0) > 0.99, "alpha_bar[0] = {}", s.alpha_bar(0));
        assert!(
            s.alpha_bar(99) < 1e-3,
            "alpha_bar[T-1] = {}",
            s.alpha_bar(99)
        );
        for t in 0..100 {
            let ab = s.alpha_bar(t);
            assert!(ab > 0.0 && ab <= 1.0);
            if t > 0 {
                assert!(ab < s.alpha_bar(t - 1));
            }
        }
    }

    #[test]
    fn rejects_bad_beta_ranges() {
        assert!(NoiseSchedule::linear(1, 1e-3, 0.2).is_err());
        assert!(NoiseSchedule::linear(100, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(100, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(100, 1e-3, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, 0.0, 0.2]).is_err());
    }

    #[test]
    fn zero_first_beta_makes_t0_noising_an_identity() {
        let s = NoiseSchedule::from_betas(vec![0.0, 0.1, 0.2]).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        let mut rng = RngStream::new(3);
        let z0 = rng.normal_tensor(&[1, 3, 4, 4], &dev()).unwrap();
        let eps = rng.normal_tensor(&[1, 3, 4, 4], &dev()).unwrap();
        let zt = s.add_noise(&z0, &eps, 0).unwrap();
        let a: Vec<f32> = zt.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = z0.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn add_noise_rejects_out_of_range_t() {
        let s = default_schedule();
        let z = Tensor::zeros(&[1, 3, 4, 4], candle_core::DType::F32, &dev()).unwrap();
        assert!(s.add_noise(&z, &z, 100).is_err());
        assert!(s.add_noise_batch(&z, &z, &[100]).is_err());
        assert!(s.add_noise_batch(&z, &z, &[0, 0]).is_err());
    }

    #[test]
    fn noising_inverts_through_x0_estimate() {
        let s = default_schedule();
        let mut rng = RngStream::new(4);
        let z0 = rng.normal_tensor(&[2, 3, 8, 8], &dev()).unwrap();
        let eps = rng.normal_tensor(&[2, 3, 8, 8], &dev()).unwrap();
        for t in [0usize, 17, 55, 99] {
            let zt = s.add_noise(&z0, &eps, t).unwrap();
            let back = estimate_x0_latent(&zt, &eps, s.alpha_bar(t)).unwrap();
            let d: f32 = (&back - &z0)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar()
                .unwrap();
            // The inversion divides by √ᾱ_t, so f32 rounding of z_t is
            // amplified at late timesteps; the bound tracks that.
            let tol = 1e-5 + 1e-6 / s.alpha_bar(t).sqrt();
            assert!((d as f64) < tol, "t={t}: max deviation {d} (tol {tol})");

            let z0_64 = z0.to_dtype(candle_core::DType::F64).unwrap();
            let eps_64 = eps.to_dtype(candle_core::DType::F64).unwrap();
            let zt_64 = s.add_noise(&z0_64, &eps_64, t).unwrap();
            let back_64 = estimate_x0_latent(&zt_64, &eps_64, s.alpha_bar(t)).unwrap();
            let d64: f64 = (&back_64 - &z0_64)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar()
                .unwrap();
            assert!(d64 < 1e-10, "t={t}: f64 max deviation {d64}");
        }
    }

    #[test]
    fn batch_noising_matches_per_sample_noising() {
        let s = default_schedule();
        let mut rng = RngStream::new(5);
        let z0 = rng.normal_tensor(&[3, 2, 4, 4], &dev()).unwrap();
        let eps = rng.normal_tensor(&[3, 2, 4, 4], &dev()).unwrap();
        let ts = [3usize, 50, 99];
        let batch = s.add_noise_batch(&z0, &eps, &ts).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let want = s
                .add_noise(&z0.narrow(0, i, 1).unwrap(), &eps.narrow(0, i, 1).unwrap(), t)
                .unwrap();
            let d: f32 = (&batch.narrow(0, i, 1).unwrap() - &want)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar()
                .unwrap();
            assert!(d < 1e-6, "sample {i} deviates by {d}");
        }
    }

    #[test]
    fn training_noise_variance_matches_offset_oracle() {
        // Per-element variance of eps + 0.02·c is 1 + 0.02²; after
        // add_noise of a zero latent it scales by (1−ᾱ_t). Estimated
        // over independent draws so the per-channel correlation cannot
        // bias the standard error.
        let s = default_schedule();
        let t = 60;
        let want = (1.0 - s.alpha_bar(t)) * (1.0 + 0.02f64.powi(2));
        let mut rng = RngStream::new(6);
        let z0 = Tensor::zeros(&[4, 3, 8, 8], candle_core::DType::F32, &dev()).unwrap();
        let mut means = Vec::new();
        for _ in 0..64 {
            let eps =
                NoiseSchedule::draw_training_noise(&mut rng, &[4, 3, 8, 8], 0.02, &dev()).unwrap();
            let zt = s.add_noise(&z0, &eps, t).unwrap();
            let m: f32 = zt.sqr().unwrap().mean_all().unwrap().to_scalar().unwrap();
            means.push(m as f64);
        }
        let k = means.len() as f64;
        let mean = means.iter().sum::<f64>() / k;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (k - 1.0);
        let se = (var / k).sqrt();
        assert!(
            (mean - want).abs() < 3.0 * se,
            "MC variance {mean} vs oracle {want} (3se = {})",
            3.0 * se
        );
    }

    #[test]
    fn schedule_round_trips_through_param_store() {
        let s = default_schedule();
        let mut store = ParamStore::new(dev());
        s.install(&mut store).unwrap();
        let back = NoiseSchedule::from_store(&store).unwrap();
        assert_eq!(back.t_steps(), s.t_steps());
        for t in 0..s.t_steps() {
            assert!((back.beta(t) - s.beta(t)).abs() < 1e-7);
        }
    }
}
