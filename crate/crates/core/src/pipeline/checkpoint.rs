use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::Tensor;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use super::ImageModel;
use crate::config::{validate_config, ModelConfig};
use crate::error::{Error, Result};
use crate::DEVICE;

pub const CHECKPOINT_FORMAT: &str = "mutual-guide-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Host copy of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct HostTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl HostTensor {
    fn of(t: &Tensor) -> Result<Self> {
        Ok(Self {
            shape: t.dims().to_vec(),
            data: t.flatten_all()?.to_vec1::<f32>()?,
        })
    }

    fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.shape.as_slice(), &DEVICE)?)
    }
}

/// Complete training state: configuration, parameters, batch-norm buffers,
/// optimizer moments, step counter and initialization seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub params: BTreeMap<String, HostTensor>,
    pub buffers: BTreeMap<String, HostTensor>,
    pub adam_m: BTreeMap<String, Vec<f32>>,
    pub adam_v: BTreeMap<String, Vec<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: serde_json::Value,
    step: u64,
    seed: u64,
    optimizer: AdamWConfig,
}

impl Checkpoint {
    pub fn capture(model: &ImageModel, opt: &AdamW, seed: u64) -> Result<Self> {
        let host = |m: &BTreeMap<String, candle_core::Var>| -> Result<BTreeMap<String, HostTensor>> {
            m.iter().map(|(k, v)| Ok((k.clone(), HostTensor::of(v.as_tensor())?))).collect()
        };
        Ok(Self {
            cfg: model.cfg.clone(),
            step: opt.step,
            seed,
            optimizer: opt.config,
            params: host(model.store.params())?,
            buffers: host(model.store.buffers())?,
            adam_m: opt.m.clone(),
            adam_v: opt.v.clone(),
        })
    }

    /// Rebuilds the model and overwrites every tensor with the stored values.
    pub fn to_model(&self) -> Result<ImageModel> {
        let model = ImageModel::new(self.cfg.clone(), self.seed)?;
        let expected: Vec<&String> = model.store.params().keys().chain(model.store.buffers().keys()).collect();
        let stored: Vec<&String> = self.params.keys().chain(self.buffers.keys()).collect();
        if let Some(missing) = expected.iter().find(|k| !stored.contains(k)) {
            return Err(Error::Checkpoint(format!("missing tensor {missing}")));
        }
        if let Some(extra) = stored.iter().find(|k| !expected.contains(k)) {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        for (name, t) in self.params.iter().chain(&self.buffers) {
            model.store.assign(name, &t.to_tensor()?)?;
        }
        Ok(model)
    }

    /// Fails with `"<field> mismatch"` naming the first configuration field
    /// that differs from `expected`.
    pub fn ensure_config(&self, expected: &ModelConfig) -> Result<()> {
        config_mismatch(&self.cfg, expected)
    }
}

fn config_mismatch(stored: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    let a = serde_json::to_value(stored).expect("config serializes");
    let b = serde_json::to_value(expected).expect("config serializes");
    const ORDER: [&str; 14] = [
        "L", "H", "W", "C", "C_prime", "M", "D", "charset", "blank_index", "encoder_depth", "encoder_heads", "mlp_ratio",
        "srb_hidden", "projector_width_strides",
    ];
    for key in ORDER {
        if a.get(key) != b.get(key) {
            return Err(Error::Checkpoint(format!("{key} mismatch")));
        }
    }
    Ok(())
}

fn le_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Single safetensors file. Tensor keys are `param/<name>`, `buffer/<name>`,
/// `adam_m/<name>` and `adam_v/<name>`; everything else lives in one JSON
/// `header` metadata entry, so the file bytes are a pure function of the state.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let header = Header {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: serde_json::to_value(&ckpt.cfg).expect("config serializes"),
        step: ckpt.step,
        seed: ckpt.seed,
        optimizer: ckpt.optimizer,
    };
    let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (prefix, map) in [("param", &ckpt.params), ("buffer", &ckpt.buffers)] {
        for (name, t) in map {
            owned.push((format!("{prefix}/{name}"), t.shape.clone(), le_bytes(&t.data)));
        }
    }
    for (prefix, map) in [("adam_m", &ckpt.adam_m), ("adam_v", &ckpt.adam_v)] {
        for (name, v) in map {
            owned.push((format!("{prefix}/{name}"), vec![v.len()], le_bytes(v)));
        }
    }
    let views = owned
        .iter()
        .map(|(name, shape, bytes)| {
            let view = TensorView::new(Dtype::F32, shape.clone(), bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
            Ok((name.clone(), view))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([("header".to_string(), serde_json::to_string(&header).expect("header serializes"))]);
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let header_json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get("header"))
        .ok_or_else(|| bad("no header".into()))?;
    let header: Header = serde_json::from_str(header_json).map_err(|e| bad(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("format mismatch: {:?}", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has {}, expected {CHECKPOINT_VERSION}",
            header.version
        )));
    }
    let cfg: ModelConfig = serde_json::from_value(header.config).map_err(|e| bad(format!("config: {e}")))?;
    let cfg = validate_config(cfg)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let mut ckpt = Checkpoint {
        cfg,
        step: header.step,
        seed: header.seed,
        optimizer: header.optimizer,
        params: BTreeMap::new(),
        buffers: BTreeMap::new(),
        adam_m: BTreeMap::new(),
        adam_v: BTreeMap::new(),
    };
    for (key, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(bad(format!("{key} is not f32")));
        }
        let data: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let (prefix, name) = key.split_once('/').ok_or_else(|| bad(format!("unexpected tensor {key}")))?;
        let t = HostTensor {
            shape: view.shape().to_vec(),
            data,
        };
        match prefix {
            "param" => ckpt.params.insert(name.to_string(), t).map(|_| ()),
            "buffer" => ckpt.buffers.insert(name.to_string(), t).map(|_| ()),
            "adam_m" => ckpt.adam_m.insert(name.to_string(), t.data).map(|_| ()),
            "adam_v" => ckpt.adam_v.insert(name.to_string(), t.data).map(|_| ()),
            _ => return Err(bad(format!("unexpected tensor {key}"))),
        };
    }
    Ok(ckpt)
}

/// Loads a checkpoint and requires its configuration to equal `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.ensure_config(expected)?;
    Ok(ckpt)
}
