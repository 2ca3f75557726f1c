//! Parameter storage and deterministically initialized layers.
//!
//! Layers are constructed from explicit tensors so that every weight is
//! filled from a seeded [`RngStream`](crate::rngutil::RngStream) instead
//! of the backend's unseedable generator. Parameters live in a sorted
//! name→variable map; models create-or-adopt variables by name, which is
//! also how checkpoints are restored (load raw tensors first, then build
//! the model on top of the same store).

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, LayerNorm, Linear};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rngutil::RngStream;

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal { std: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Uniform on ±1/√fan_in, the usual default for conv/linear weights
    /// and biases.
    FanIn(usize),
}

/// Sorted name→variable map backing every model in the crate.
pub struct ParamStore {
    device: Device,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(device: Device) -> Self {
        ParamStore {
            device,
            vars: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Returns the named variable's tensor, creating it with `init` when
    /// absent. The returned tensor shares storage with the variable, so
    /// optimizer updates are visible to layers holding it.
    pub fn var(
        &mut self,
        name: &str,
        dims: &[usize],
        init: Init,
        rng: &mut RngStream,
    ) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != dims {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    v.dims(),
                    dims
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = dims.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c as f32; n],
            Init::Normal { std } => rng
                .normal_vec(n)
                .into_iter()
                .map(|x| x * std as f32)
                .collect(),
            Init::Uniform { lo, hi } => rng.uniform_vec(n, lo as f32, hi as f32),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
                rng.uniform_vec(n, -bound, bound)
            }
        };
        let t = Tensor::from_vec(data, dims, &self.device)?;
        let v = Var::from_tensor(&t)?;
        let out = v.as_tensor().clone();
        self.vars.insert(name.to_string(), v);
        Ok(out)
    }

    /// Installs a raw tensor as a variable (checkpoint restore path).
    pub fn insert_raw(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let t = if t.dtype() == DType::F32 {
            t.clone()
        } else {
            t.to_dtype(DType::F32)?
        };
        let v = Var::from_tensor(&t.to_device(&self.device)?)?;
        self.vars.insert(name.to_string(), v);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.vars.get(name).map(|v| v.as_tensor().clone())
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    /// All variables in name order.
    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Variables whose names satisfy `pred`, in name order.
    pub fn vars_matching(&self, pred: impl Fn(&str) -> bool) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Detached copies of every parameter, for serialization.
    pub fn named_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_tensor().detach().copy()?);
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Hash of every parameter's name, shape and contents; stable across
    /// runs, changes iff any parameter changes.
    pub fn content_hash(&self) -> Result<String> {
        self.content_hash_matching(|_| true)
    }

    /// Overwrites every parameter with small seeded Gaussian noise.
    /// Test fixtures use this to make zero-initialized output layers
    /// (which are inert by design) respond to their inputs.
    pub fn scramble(&self, seed: u64) -> Result<()> {
        let mut rng = RngStream::derive(seed, "scramble", 0);
        for (_, v) in self.vars.iter() {
            let t = rng.normal_tensor(v.dims(), &self.device)?;
            v.set(&(t * 0.05)?)?;
        }
        Ok(())
    }

    /// [`content_hash`](Self::content_hash) restricted to matching names.
    pub fn content_hash_matching(&self, pred: impl Fn(&str) -> bool) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in self.vars.iter().filter(|(k, _)| pred(k)) {
            h.update(k.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let data: Vec<f32> = v.as_tensor().flatten_all()?.to_vec1()?;
            for x in data {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Conv2d with weights `U(±1/√fan_in)` and zero-filled bias storage
/// created under `name.weight` / `name.bias`.
pub fn conv2d(
    ps: &mut ParamStore,
    rng: &mut RngStream,
    name: &str,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    cfg: Conv2dConfig,
) -> Result<Conv2d> {
    let fan_in = in_c * kernel * kernel;
    let w = ps.var(
        &format!("{name}.weight"),
        &[out_c, in_c, kernel, kernel],
        Init::FanIn(fan_in),
        rng,
    )?;
    let b = ps.var(&format!("{name}.bias"), &[out_c], Init::FanIn(fan_in), rng)?;
    Ok(Conv2d::new(w, Some(b), cfg))
}

/// Conv2d whose weights and bias start at exactly zero (used for gated
/// residual taps that must be inert at initialization).
pub fn conv2d_zero(
    ps: &mut ParamStore,
    rng: &mut RngStream,
    name: &str,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    cfg: Conv2dConfig,
) -> Result<Conv2d> {
    let w = ps.var(
        &format!("{name}.weight"),
        &[out_c, in_c, kernel, kernel],
        Init::Zeros,
        rng,
    )?;
    let b = ps.var(&format!("{name}.bias"), &[out_c], Init::Zeros, rng)?;
    Ok(Conv2d::new(w, Some(b), cfg))
}

pub fn linear(
    ps: &mut ParamStore,
    rng: &mut RngStream,
    name: &str,
    in_d: usize,
    out_d: usize,
) -> Result<Linear> {
    let w = ps.var(
        &format!("{name}.weight"),
        &[out_d, in_d],
        Init::FanIn(in_d),
        rng,
    )?;
    let b = ps.var(&format!("{name}.bias"), &[out_d], Init::FanIn(in_d), rng)?;
    Ok(Linear::new(w, Some(b)))
}

pub fn linear_no_bias(
    ps: &mut ParamStore,
    rng: &mut RngStream,
    name: &str,
    in_d: usize,
    out_d: usize,
) -> Result<Linear> {
    let w = ps.var(
        &format!("{name}.weight"),
        &[out_d, in_d],
        Init::FanIn(in_d),
        rng,
    )?;
    Ok(Linear::new(w, None))
}

pub fn group_norm(
    ps: &mut ParamStore,
    rng: &mut RngStream,
    name: &str,
    channels: usize,
    groups: usize,
) -> Result<GroupNorm> {
    let w = ps.var(&format!("{name}.weight"), &[channels], Init::Const(1.0), rng)?;
    let b = ps.var(&format!("{name}.bias"), &[channels], Init::Zeros, rng)?;
    Ok(GroupNorm::new(w, b, channels, groups, 1e-5)?)
}

pub fn layer_norm(
    ps: &mut ParamStore,
    rng: &mut RngStream,
    name: &str,
    dim: usize,
) -> Result<LayerNorm> {
    let w = ps.var(&format!("{name}.weight"), &[dim], Init::Const(1.0), rng)?;
    let b = ps.var(&format!("{name}.bias"), &[dim], Init::Zeros, rng)?;
    Ok(LayerNorm::new(w, b, 1e-5))
}

/// An embedding table initialized N(0, 0.02), looked up via
/// [`embed`].
pub fn embedding_table(
    ps: &mut ParamStore,
    rng: &mut RngStream,
    name: &str,
    vocab: usize,
    dim: usize,
) -> Result<Tensor> {
    ps.var(name, &[vocab, dim], Init::Normal { std: 0.02 }, rng)
}

/// Rows of `table` at `ids`, shape `[ids.len(), dim]`.
pub fn embed(table: &Tensor, ids: &[u32]) -> Result<Tensor> {
    let idx = Tensor::from_vec(ids.to_vec(), &[ids.len()], table.device())?;
    Ok(table.index_select(&idx, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (ParamStore, RngStream) {
        (ParamStore::new(Device::Cpu), RngStream::new(11))
    }

    #[test]
    fn var_creation_is_deterministic_per_seed() {
        let (mut a, mut ra) = store();
        let (mut b, mut rb) = store();
        let ta = a.var("w", &[4, 3], Init::FanIn(3), &mut ra).unwrap();
        let tb = b.var("w", &[4, 3], Init::FanIn(3), &mut rb).unwrap();
        let va: Vec<f32> = ta.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = tb.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn existing_var_is_adopted_not_reinitialized() {
        let (mut ps, mut rng) = store();
        let t = Tensor::from_vec(vec![1.0f32, 2.0, 3.0], &[3], &Device::Cpu).unwrap();
        ps.insert_raw("w", &t).unwrap();
        let got = ps.var("w", &[3], Init::Zeros, &mut rng).unwrap();
        let v: Vec<f32> = got.to_vec1().unwrap();
        assert_eq!(v, vec![1.0, 2.0, 3.0]);
        assert!(ps.var("w", &[4], Init::Zeros, &mut rng).is_err());
    }

    #[test]
    fn optimizer_updates_are_visible_through_layer_tensors() {
        use candle_nn::Optimizer;
        let (mut ps, mut rng) = store();
        let lin = linear(&mut ps, &mut rng, "l", 2, 2).unwrap();
        let before: Vec<f32> = lin
            .weight()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let mut opt = candle_nn::AdamW::new_lr(ps.all_vars(), 0.1).unwrap();
        let x = Tensor::from_vec(vec![1.0f32, -1.0], &[1, 2], &Device::Cpu).unwrap();
        let loss = lin.weight().matmul(&x.t().unwrap()).unwrap().sqr().unwrap().sum_all().unwrap();
        opt.backward_step(&loss).unwrap();
        let after: Vec<f32> = lin
            .weight()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert_ne!(before, after, "update must flow into the layer's tensor");
    }

    #[test]
    fn content_hash_tracks_changes() {
        let (mut ps, mut rng) = store();
        ps.var("a", &[2, 2], Init::FanIn(2), &mut rng).unwrap();
        let h1 = ps.content_hash().unwrap();
        assert_eq!(h1, ps.content_hash().unwrap());
        ps.var("b", &[2], Init::Zeros, &mut rng).unwrap();
        assert_ne!(h1, ps.content_hash().unwrap());
    }

    #[test]
    fn embed_selects_rows() {
        let (mut ps, mut rng) = store();
        let table = embedding_table(&mut ps, &mut rng, "emb", 5, 4).unwrap();
        let rows = embed(&table, &[3, 0, 3]).unwrap();
        assert_eq!(rows.dims(), &[3, 4]);
        let r0: Vec<f32> = rows.get(0).unwrap().to_vec1().unwrap();
        let r2: Vec<f32> = rows.get(2).unwrap().to_vec1().unwrap();
        assert_eq!(r0, r2);
    }

    #[test]
    fn zero_conv_outputs_zero() {
        let (mut ps, mut rng) = store();
        let conv = conv2d_zero(&mut ps, &mut rng, "c", 3, 2, 3, Default::default()).unwrap();
        let mut r = RngStream::new(3);
        let x = r.normal_tensor(&[1, 3, 8, 8], &Device::Cpu).unwrap();
        use candle_core::Module;
        let y = conv.forward(&x).unwrap();
        let m: f32 = y.abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(m, 0.0);
    }
}
