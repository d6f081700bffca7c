//! Checkpoints as safetensors files: named tensors plus a JSON metadata entry.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{AttributeSchema, Preprocessor};
use crate::error::{MmflError, Result};
use crate::losses::CenterState;
use crate::model::MmflNet;
use crate::settings::RunConfig;
use crate::train::optim::{Adam, AdamConfig};
use crate::train::trainer::EpochRecord;

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "mmfl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Number of completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub adam_step: u64,
    pub config: RunConfig,
    /// Training pid of each classifier row.
    pub class_map: Vec<u64>,
    pub preprocessor: Preprocessor,
    pub schema: AttributeSchema,
    pub best_map: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: HashMap<String, Tensor>,
}

fn dtype_name(dtype: DType) -> &'static str {
    match dtype {
        DType::F64 => "f64",
        _ => "f32",
    }
}

pub fn save_checkpoint(
    path: &Path,
    net: &MmflNet,
    centers: &CenterState,
    adam: &Adam,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (name, t) in net.store.snapshot()? {
        tensors.push((format!("model.{name}"), t));
    }
    tensors.push(("centers.value".into(), centers.centers.as_tensor().copy()?));
    tensors.push(("centers.velocity".into(), centers.velocity.copy()?));
    for (i, name) in adam.names.iter().enumerate() {
        tensors.push((format!("adam.m.{name}"), adam.m[i].copy()?));
        tensors.push((format!("adam.v.{name}"), adam.v[i].copy()?));
    }
    let mut info = HashMap::new();
    info.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    info.insert("format_version".into(), FORMAT_VERSION.to_string());
    info.insert("dtype".into(), dtype_name(net.dtype()).into());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| MmflError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(info), &tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| MmflError::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(MmflError::Checkpoint(format!("checkpoint {} not found", path.display())));
    }
    let bytes = std::fs::read(path).map_err(|e| MmflError::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)?;
    let info = header
        .metadata()
        .as_ref()
        .ok_or_else(|| MmflError::Checkpoint(format!("{} has no metadata", path.display())))?;
    let raw = info
        .get(META_KEY)
        .ok_or_else(|| MmflError::Checkpoint(format!("{} is not an mmfl checkpoint", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(raw)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(MmflError::Checkpoint(format!(
            "unsupported checkpoint format {} (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    Ok(Checkpoint { meta, tensors })
}

impl Checkpoint {
    fn with_prefix(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
            .collect()
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| MmflError::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn dtype(&self) -> DType {
        self.tensors.values().next().map_or(DType::F32, |t| t.dtype())
    }

    /// Rebuilds the network and loads every stored parameter and buffer.
    pub fn restore_model(&self, device: &Device) -> Result<MmflNet> {
        let m = &self.meta;
        let net = MmflNet::new(
            &m.config.model,
            &m.schema,
            m.class_map.len(),
            m.config.seed,
            self.dtype(),
            device,
        )?;
        net.store.load(&self.with_prefix("model."))?;
        Ok(net)
    }

    pub fn restore_centers(&self) -> Result<CenterState> {
        let value = self.tensor("centers.value")?;
        Ok(CenterState {
            centers: candle_core::Var::from_tensor(value)?,
            velocity: self.tensor("centers.velocity")?.clone(),
        })
    }

    pub fn restore_adam(&self, net: &MmflNet, config: AdamConfig) -> Result<Adam> {
        let mut adam = Adam::new(&net.store, config)?;
        for (i, name) in adam.names.clone().iter().enumerate() {
            adam.m[i] = self.tensor(&format!("adam.m.{name}"))?.clone();
            adam.v[i] = self.tensor(&format!("adam.v.{name}"))?.clone();
        }
        adam.step = self.meta.adam_step;
        Ok(adam)
    }
}
