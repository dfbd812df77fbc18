//! Single-file checkpoints: a safetensors container whose header metadata
//! carries a JSON manifest (format version, model config, step, seed and
//! free-form metadata).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelConfig, TapNetwork, UNet};
use crate::nn::ParamStore;

pub const CHECKPOINT_FORMAT: &str = "contrakd-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

const FORMAT_KEY: &str = "format";
const MANIFEST_KEY: &str = "manifest";
/// Arrays that belong to training-time helpers (projectors, adapters).
pub const AUX_PREFIX: &str = "aux.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub step: u64,
    pub seed: u64,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig, step: u64, seed: u64) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            model,
            step,
            seed,
            extra: BTreeMap::new(),
        }
    }

    pub fn with_extra(mut self, key: &str, value: serde_json::Value) -> Self {
        self.extra.insert(key.to_string(), value);
        self
    }
}

/// Raw contents of a checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Model arrays only.
    pub fn model_arrays(&self) -> BTreeMap<String, Tensor> {
        self.arrays
            .iter()
            .filter(|(k, _)| !k.starts_with(AUX_PREFIX))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Auxiliary arrays saved under `group`, with the group prefix stripped.
    pub fn aux_arrays(&self, group: &str) -> BTreeMap<String, Tensor> {
        let prefix = format!("{AUX_PREFIX}{group}.");
        self.arrays
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    /// Names of the auxiliary groups present.
    pub fn aux_groups(&self) -> Vec<String> {
        let mut groups: Vec<String> = self
            .arrays
            .keys()
            .filter_map(|k| k.strip_prefix(AUX_PREFIX))
            .filter_map(|rest| rest.split_once('.').map(|(g, _)| g.to_string()))
            .collect();
        groups.dedup();
        groups
    }

    /// Builds a network from `cfg` and loads the model arrays into it.
    pub fn instantiate(&self, cfg: &ModelConfig) -> Result<UNet> {
        let model = UNet::new(cfg, self.meta.seed, candle_core::DType::F32, &Device::Cpu)?;
        model.params().load(&self.model_arrays())?;
        Ok(model)
    }
}

/// Writes `model` plus named auxiliary stores. The file appears atomically.
pub fn save_checkpoint(
    path: &Path,
    model: &dyn TapNetwork,
    meta: &CheckpointMeta,
    aux: &[(&str, &ParamStore)],
) -> Result<()> {
    if meta.model != *model.config() {
        return Err(Error::InvalidArgument(
            "checkpoint manifest config differs from the model's config".into(),
        ));
    }
    let mut arrays = model.params().snapshot()?;
    for (group, store) in aux {
        if group.is_empty() || group.contains('.') {
            return Err(Error::InvalidArgument(format!("invalid aux group name `{group}`")));
        }
        for (name, t) in store.snapshot()? {
            arrays.insert(format!("{AUX_PREFIX}{group}.{name}"), t);
        }
    }
    let manifest = serde_json::to_string(meta).map_err(|e| ckpt_err(path, e))?;
    let info = HashMap::from([
        (FORMAT_KEY.to_string(), CHECKPOINT_FORMAT.to_string()),
        (MANIFEST_KEY.to_string(), manifest),
    ]);
    let bytes = safetensors::serialize(arrays.iter(), Some(info)).map_err(|e| ckpt_err(path, e))?;
    write_atomic(path, &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn ckpt_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e))?;
    let info = header
        .metadata()
        .as_ref()
        .ok_or_else(|| ckpt_err(path, "no metadata manifest"))?;
    if info.get(FORMAT_KEY).map(String::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(ckpt_err(path, format!("not a {CHECKPOINT_FORMAT} file")));
    }
    let manifest = info
        .get(MANIFEST_KEY)
        .ok_or_else(|| ckpt_err(path, "manifest entry missing"))?;
    let raw: serde_json::Value = serde_json::from_str(manifest).map_err(|e| ckpt_err(path, e))?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| ckpt_err(path, "manifest has no format_version"))?;
    if found != CHECKPOINT_VERSION as u64 {
        return Err(Error::CheckpointVersion {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta: CheckpointMeta = serde_json::from_value(raw).map_err(|e| ckpt_err(path, e))?;
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e))?;
    let mut arrays = BTreeMap::new();
    for (name, view) in st.tensors() {
        arrays.insert(name, view.load(&Device::Cpu)?);
    }
    Ok(Checkpoint { meta, arrays })
}

/// Loads a checkpoint and rebuilds the network it was saved from.
pub fn load_checkpoint(path: &Path) -> Result<(UNet, CheckpointMeta)> {
    let ckpt = read_checkpoint(path)?;
    let model = ckpt.instantiate(&ckpt.meta.model)?;
    Ok((model, ckpt.meta))
}

/// Loads a checkpoint's weights into a network built from `cfg`, which may
/// differ from the stored config. Fails on the first incompatible array.
pub fn load_checkpoint_as(path: &Path, cfg: &ModelConfig) -> Result<(UNet, CheckpointMeta)> {
    let ckpt = read_checkpoint(path)?;
    let model = ckpt.instantiate(cfg)?;
    Ok((model, ckpt.meta))
}
