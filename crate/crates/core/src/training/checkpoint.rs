//! Single-file checkpoint archive.
//!
//! Layout: the magic `WTALCKPT`, a little-endian `u64` header length, a JSON
//! header (config text and hash, class names, tensor names and shapes,
//! iteration, optimizer step), then every tensor as little-endian `f64`
//! followed by the optimizer's first and second moments in the same order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{invalid, Error, Result};
use crate::framework::Framework;
use crate::params::{Adam, ParamStore};

use super::config::{Profile, TrainConfig};

const MAGIC: &[u8; 8] = b"WTALCKPT";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    pub iteration: usize,
    pub store: ParamStore,
    pub adam: Adam,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: String,
    config_hash: String,
    class_names: Vec<String>,
    iteration: usize,
    adam_step: u64,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let header = Header {
        config: ckpt.config.to_text(),
        config_hash: ckpt.config.hash(),
        class_names: ckpt.class_names.clone(),
        iteration: ckpt.iteration,
        adam_step: ckpt.adam.step,
        tensors: ckpt
            .store
            .ids()
            .map(|id| {
                let (rows, cols) = ckpt.store.get(id).dim();
                TensorInfo {
                    name: ckpt.store.name(id).to_string(),
                    rows,
                    cols,
                }
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 24 * ckpt.store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let (m, v) = ckpt.adam.moments();
    let tensors = ckpt.store.ids().map(|id| ckpt.store.get(id));
    for t in tensors.chain(m.iter()).chain(v.iter()) {
        for x in t.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

/// Decodes an archive. Returns warnings alongside the checkpoint, e.g. when
/// its config hash differs from `expected`.
pub fn read_checkpoint(
    bytes: &[u8],
    expected: Option<&TrainConfig>,
) -> Result<(Checkpoint, Vec<String>)> {
    let corrupt = |m: &str| Error::Corrupt(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if len > body.len() {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..len])
        .map_err(|e| Error::Corrupt(format!("bad header: {e}")))?;
    let config = TrainConfig::from_sources(Some(&header.config), &[], Profile::Thumos)
        .map_err(|e| Error::Corrupt(format!("stored config: {e}")))?;
    let mut warnings = Vec::new();
    if config.hash() != header.config_hash {
        warnings.push(format!(
            "stored config hash {} does not match its config text ({})",
            header.config_hash,
            config.hash()
        ));
    }
    if let Some(exp) = expected {
        if exp.hash() != header.config_hash {
            warnings.push(format!(
                "checkpoint config hash {} differs from the current config hash {}",
                header.config_hash,
                exp.hash()
            ));
        }
    }
    let scalars: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    let data = &body[len..];
    if data.len() != 3 * scalars * 8 {
        return Err(Error::Corrupt(format!(
            "expected {} payload bytes, found {}",
            3 * scalars * 8,
            data.len()
        )));
    }
    let mut words = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut take = |t: &TensorInfo| -> Mat {
        let values: Vec<f64> = words.by_ref().take(t.rows * t.cols).collect();
        Mat::from_shape_vec((t.rows, t.cols), values).expect("length checked above")
    };
    let mut store = ParamStore::default();
    for t in &header.tensors {
        store.register(t.name.clone(), take(t));
    }
    let m: Vec<Mat> = header.tensors.iter().map(&mut take).collect();
    let v: Vec<Mat> = header.tensors.iter().map(&mut take).collect();
    let adam = Adam::from_state(
        &store,
        config.learning_rate,
        config.weight_decay,
        header.adam_step,
        m,
        v,
    )
    .ok_or_else(|| corrupt("optimizer state does not match parameters"))?;
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((
        Checkpoint {
            config,
            class_names: header.class_names,
            iteration: header.iteration,
            store,
            adam,
        },
        warnings,
    ))
}

pub fn load_checkpoint(
    path: &Path,
    expected: Option<&TrainConfig>,
) -> Result<(Checkpoint, Vec<String>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, expected)
}

impl Checkpoint {
    /// Fails unless `class_names` matches the classes the model was trained on.
    pub fn check_classes(&self, class_names: &[String]) -> Result<()> {
        if class_names.len() != self.class_names.len() {
            return Err(invalid!(
                "checkpoint was trained on {} classes but the manifest has {}",
                self.class_names.len(),
                class_names.len()
            ));
        }
        if class_names != self.class_names.as_slice() {
            return Err(invalid!(
                "checkpoint class names differ from the manifest's"
            ));
        }
        Ok(())
    }

    /// Rebuilds the model and installs the stored tensors.
    pub fn to_framework(&self) -> Result<Framework> {
        let mut fw = Framework::new(self.config.clone(), self.class_names.clone())?;
        if fw.store.len() != self.store.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint has {} tensors, model expects {}",
                self.store.len(),
                fw.store.len()
            )));
        }
        let ids: Vec<_> = fw.store.ids().collect();
        for id in ids {
            let name = fw.store.name(id).to_string();
            let src = self
                .store
                .id(&name)
                .ok_or_else(|| Error::Corrupt(format!("tensor {name} missing")))?;
            let value = self.store.get(src);
            if value.dim() != fw.store.get(id).dim() {
                return Err(Error::Corrupt(format!(
                    "tensor {name} has shape {:?}",
                    value.dim()
                )));
            }
            fw.store.get_mut(id).assign(value);
        }
        Ok(fw)
    }
}
