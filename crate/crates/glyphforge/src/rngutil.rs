//! Seeded random streams and random tensor construction.
//!
//! The CPU tensor backend has no seedable generator, so every random
//! tensor in the crate is filled from an explicit ChaCha20 stream.
//! Worker and role seeds derive from the global seed by hashing, so two
//! streams never alias even when indices collide across roles.

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Derives a child seed from `(global, role, index)`.
pub fn derive_seed(global: u64, role: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(role.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}

/// A deterministic random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Stream keyed by `(global, role, index)`.
    pub fn derive(global: u64, role: &str, index: u64) -> Self {
        RngStream::new(derive_seed(global, role, index))
    }

    pub fn gen_f64(&mut self) -> f64 {
        self.rng.gen()
    }

    pub fn gen_f32(&mut self) -> f32 {
        self.rng.gen()
    }

    /// Uniform integer in `[0, n)`.
    pub fn gen_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "gen_index over empty range");
        self.rng.gen_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn gen_range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.gen_range(lo..=hi)
    }

    pub fn gen_bool(&mut self, p: f64) -> bool {
        self.rng.gen_bool(p)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    pub fn normal_f32(&mut self) -> f32 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.normal_f32()).collect()
    }

    pub fn uniform_vec(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| self.rng.gen_range(lo..hi)).collect()
    }

    /// Standard-normal tensor of the given dimensions.
    pub fn normal_tensor(&mut self, dims: &[usize], device: &Device) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        Ok(Tensor::from_vec(self.normal_vec(n), dims, device)?)
    }

    /// Uniform tensor on `[lo, hi)` of the given dimensions.
    pub fn uniform_tensor(
        &mut self,
        dims: &[usize],
        lo: f32,
        hi: f32,
        device: &Device,
    ) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        Ok(Tensor::from_vec(self.uniform_vec(n, lo, hi), dims, device)?)
    }
}
