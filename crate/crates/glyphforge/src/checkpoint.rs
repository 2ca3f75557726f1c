//! Checkpoint files: safetensors parameter blobs with identifying
//! metadata (model kind, config hash, alphabet hash, step, phase).

use std::collections::HashMap;
use std::path::Path;

use candle_core::Device;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_SCHEMA: u32 = 1;

/// Identity of a parameter blob; loading verifies it against the run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    /// Model family: `denoiser`, `recognizer`, or `codec`.
    pub kind: String,
    pub config_hash: String,
    pub alphabet_hash: String,
    pub step: usize,
    /// Training stage the blob was written in (`phase1`,
    /// `phase2_adapter`, `phase2_joint`, `final`, …).
    pub phase: String,
    pub schema_version: u32,
}

impl CheckpointMeta {
    fn to_map(&self) -> HashMap<String, String> {
        HashMap::from([
            ("kind".to_string(), self.kind.clone()),
            ("config_hash".to_string(), self.config_hash.clone()),
            ("alphabet_hash".to_string(), self.alphabet_hash.clone()),
            ("step".to_string(), self.step.to_string()),
            ("phase".to_string(), self.phase.clone()),
            (
                "schema_version".to_string(),
                self.schema_version.to_string(),
            ),
        ])
    }

    fn from_map(map: &HashMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {k:?}")))
        };
        let schema_version: u32 = get("schema_version")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad schema_version".into()))?;
        if schema_version > CHECKPOINT_SCHEMA {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint schema {schema_version} (newest known: {CHECKPOINT_SCHEMA})"
            )));
        }
        Ok(CheckpointMeta {
            kind: get("kind")?,
            config_hash: get("config_hash")?,
            alphabet_hash: get("alphabet_hash")?,
            step: get("step")?
                .parse()
                .map_err(|_| Error::Checkpoint("bad step".into()))?,
            phase: get("phase")?,
            schema_version,
        })
    }
}

/// Writes every parameter in `params` plus `meta` to `path`.
pub fn save_checkpoint(path: &Path, params: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    let named = params.named_tensors()?;
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(named.len());
    for (name, t) in &named {
        let data: Vec<f32> = t.flatten_all()?.to_vec1()?;
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        buffers.push((name.clone(), t.dims().to_vec(), bytes));
    }
    let views: Vec<(&str, TensorView)> = buffers
        .iter()
        .map(|(name, dims, bytes)| {
            let view = TensorView::new(Dtype::F32, dims.clone(), bytes)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e:?}")))?;
            Ok((name.as_str(), view))
        })
        .collect::<Result<_>>()?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    safetensors::serialize_to_file(views, &Some(meta.to_map()), path)
        .map_err(|e| Error::Checkpoint(format!("write {}: {e:?}", path.display())))?;
    Ok(())
}

/// Reads only the metadata block of a checkpoint.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path)?;
    let (_, meta) = SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("read {}: {e:?}", path.display())))?;
    let map = meta
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no metadata".into()))?;
    CheckpointMeta::from_map(map)
}

/// Loads a checkpoint into a fresh parameter store. Models built on the
/// returned store adopt the restored values.
pub fn load_checkpoint(path: &Path, device: &Device) -> Result<(ParamStore, CheckpointMeta)> {
    let meta = read_meta(path)?;
    let mut ps = ParamStore::new(device.clone());
    let tensors = candle_core::safetensors::load(path, device)?;
    for (name, t) in tensors {
        ps.insert_raw(&name, &t)?;
    }
    Ok((ps, meta))
}

/// Rejects a checkpoint whose identity does not match the run.
pub fn check_compat(
    meta: &CheckpointMeta,
    kind: &str,
    config_hash: Option<&str>,
    alphabet_hash: &str,
) -> Result<()> {
    if meta.kind != kind {
        return Err(Error::Checkpoint(format!(
            "checkpoint kind {:?} where {kind:?} is required",
            meta.kind
        )));
    }
    if let Some(h) = config_hash {
        if meta.config_hash != h {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {}, run {}",
                &meta.config_hash[..12.min(meta.config_hash.len())],
                &h[..12.min(h.len())]
            )));
        }
    }
    if meta.alphabet_hash != alphabet_hash {
        return Err(Error::Checkpoint(
            "alphabet hash mismatch: checkpoint was trained on a different alphabet".into(),
        ));
    }
    Ok(())
}
