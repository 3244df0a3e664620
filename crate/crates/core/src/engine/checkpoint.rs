//! Checkpoints: a safetensors container of parameters and optimizer moments
//! with a JSON manifest stored under the `manifest` metadata key.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamHyper};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;

pub const FORMAT_VERSION: u32 = 1;

const PARAM: &str = "param/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerManifest {
    pub hyper: AdamHyper,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Training steps completed.
    pub step: usize,
    pub config: Config,
    /// Parameter names grouped by top-level module.
    pub modules: BTreeMap<String, Vec<String>>,
    pub optimizer: Option<OptimizerManifest>,
}

/// Loaded checkpoint contents.
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

fn ckpt_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

fn to_bytes(t: &Tensor) -> Result<(StDtype, Vec<usize>, Vec<u8>)> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => (StDtype::F32, shape, flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        DType::F64 => (StDtype::F64, shape, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn from_view(view: &TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let bytes = view.data();
    let t = match view.dtype() {
        StDtype::F32 => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        StDtype::F64 => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported stored dtype {other:?}"))),
    };
    Ok(t)
}

fn module_of(name: &str) -> String {
    name.split('.').next().unwrap_or(name).to_string()
}

/// Writes model parameters, optional optimizer state and the manifest.
pub fn save_checkpoint(path: &Path, model: &Model, config: &Config, step: usize, adam: Option<&Adam>) -> Result<()> {
    let mut entries: Vec<(String, StDtype, Vec<usize>, Vec<u8>)> = Vec::new();
    let mut modules: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (name, var) in model.params.vars() {
        let (dt, shape, bytes) = to_bytes(var.as_tensor())?;
        entries.push((format!("{PARAM}{name}"), dt, shape, bytes));
        modules.entry(module_of(name)).or_default().push(name.clone());
    }
    if let Some(adam) = adam {
        for (prefix, map) in [(ADAM_M, &adam.m), (ADAM_V, &adam.v)] {
            for (name, t) in map {
                let (dt, shape, bytes) = to_bytes(t)?;
                entries.push((format!("{prefix}{name}"), dt, shape, bytes));
            }
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        step,
        config: config.clone(),
        modules,
        optimizer: adam.map(|a| OptimizerManifest { hyper: a.hyper, t: a.t }),
    };
    let json = serde_json::to_string(&manifest).map_err(ckpt_err)?;
    let views = entries
        .iter()
        .map(|(n, dt, shape, bytes)| Ok((n.clone(), TensorView::new(*dt, shape.clone(), bytes).map_err(ckpt_err)?)))
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([("manifest".to_string(), json)]);
    let buffer = safetensors::serialize(views, Some(meta)).map_err(ckpt_err)?;
    std::fs::write(path, buffer).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buffer = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&buffer).map_err(ckpt_err)?;
    let json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get("manifest"))
        .ok_or_else(|| Error::Checkpoint("missing manifest".into()))?;
    let manifest: CheckpointManifest = serde_json::from_str(json).map_err(ckpt_err)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let st = SafeTensors::deserialize(&buffer).map_err(ckpt_err)?;
    let (mut params, mut adam_m, mut adam_v) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
    for (name, view) in st.tensors() {
        let t = from_view(&view)?;
        if let Some(n) = name.strip_prefix(PARAM) {
            params.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(ADAM_M) {
            adam_m.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(ADAM_V) {
            adam_v.insert(n.to_string(), t);
        } else {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
    }
    Ok(Checkpoint { manifest, params, adam_m, adam_v })
}

impl Checkpoint {
    /// Builds the model described by the manifest and loads its parameters.
    pub fn model(&self) -> Result<Model> {
        let cfg = &self.manifest.config;
        let first_dtype = self.params.values().next().map_or(DType::F32, |t| t.dtype());
        let model = Model::with_dtype(&cfg.model, cfg.seed, first_dtype)?;
        self.load_into(&model)?;
        Ok(model)
    }

    pub fn load_into(&self, model: &Model) -> Result<()> {
        let vars = model.params.vars();
        if vars.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                vars.len()
            )));
        }
        for (name, var) in vars {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name} missing from checkpoint")))?;
            if t.dims() != var.as_tensor().dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.as_tensor().dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    /// Optimizer state, when the checkpoint carries one.
    pub fn adam(&self) -> Option<Adam> {
        let opt = self.manifest.optimizer.as_ref()?;
        Some(Adam { hyper: opt.hyper, t: opt.t, m: self.adam_m.clone(), v: self.adam_v.clone() })
    }
}
