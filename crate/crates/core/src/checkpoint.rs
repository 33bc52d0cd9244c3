//! Parameter archives.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! u64            header length L
//! L bytes        JSON header
//! ...            raw tensor data
//! ```
//!
//! The header maps each tensor name to `{"dtype", "shape", "data_offsets"}`,
//! offsets relative to the start of the data block, and carries string
//! metadata under `__metadata__`, including `schema`. Model parameters use
//! their dotted names (`stem.*`, `leaf1.*`, `leaf2.*`, `mfem.*`, `bem.*`,
//! `mgfm.*`, `dec1.*`); optimiser moments are stored as `adam.m.<name>` and
//! `adam.v.<name>`. The layout is readable by safetensors tooling.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SCHEMA: u32 = 1;

/// Named tensors plus string metadata.
#[derive(Clone, Debug, Default)]
pub struct Archive<T> {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<T: Scalar> Archive<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        let mut meta: Map<String, Value> = self.metadata.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
        meta.insert("schema".into(), json!(SCHEMA.to_string()));
        header.insert("__metadata__".into(), Value::Object(meta));
        let mut data = Vec::new();
        for (name, t) in &self.tensors {
            let start = data.len();
            data.extend(T::to_le_bytes_vec(t.data()));
            header.insert(name.clone(), json!({"dtype": T::DTYPE, "shape": t.shape(), "data_offsets": [start, data.len()]}));
        }
        let mut head = serde_json::to_vec(&Value::Object(header)).expect("header serialises");
        while !head.len().is_multiple_of(8) {
            head.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + head.len() + data.len());
        out.extend((head.len() as u64).to_le_bytes());
        out.extend(head);
        out.extend(data);
        out
    }

    /// Parses an archive stored as `F32` or `F64`, converting to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let archive = Self::parse(bytes, false)?;
        match archive.metadata.get("schema").map(String::as_str) {
            Some(s) if s == SCHEMA.to_string() => Ok(archive),
            Some(s) => Err(bad(format!("schema {s} is not supported (expected {SCHEMA})"))),
            None => Err(bad("missing schema in metadata")),
        }
    }

    /// Any safetensors file; with `lenient`, tensors of other dtypes are
    /// skipped instead of rejected.
    pub fn parse(bytes: &[u8], lenient: bool) -> Result<Self> {
        let len = bytes.get(..8).ok_or_else(|| bad("file shorter than its length prefix"))?;
        let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
        let head = bytes.get(8..8 + len).ok_or_else(|| bad("truncated header"))?;
        let data = &bytes[8 + len..];
        let header: Map<String, Value> =
            serde_json::from_slice(head).map_err(|e| bad(format!("header is not a JSON object: {e}")))?;
        let mut archive = Archive::default();
        for (name, entry) in header {
            if name == "__metadata__" {
                let obj = entry.as_object().ok_or_else(|| bad("metadata must be an object"))?;
                for (k, v) in obj {
                    let v = v.as_str().ok_or_else(|| bad(format!("metadata `{k}` is not a string")))?;
                    archive.metadata.insert(k.clone(), v.to_string());
                }
                continue;
            }
            let dtype = entry["dtype"].as_str().ok_or_else(|| bad(format!("`{name}` has no dtype")))?;
            let shape: Vec<usize> = entry["shape"]
                .as_array()
                .ok_or_else(|| bad(format!("`{name}` has no shape")))?
                .iter()
                .map(|d| d.as_u64().map(|d| d as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| bad(format!("`{name}` has a malformed shape")))?;
            let off = entry["data_offsets"].as_array().filter(|a| a.len() == 2);
            let (a, b) = off
                .and_then(|o| Some((o[0].as_u64()? as usize, o[1].as_u64()? as usize)))
                .ok_or_else(|| bad(format!("`{name}` has malformed data offsets")))?;
            let raw = data.get(a..b).filter(|_| a <= b).ok_or_else(|| bad(format!("`{name}` points outside the data block")))?;
            let numel: usize = shape.iter().product();
            let values: Vec<T> = match dtype {
                "F32" => f32::from_le_bytes_slice(raw).into_iter().map(|v| T::c(f64::from(v))).collect(),
                "F64" => f64::from_le_bytes_slice(raw).into_iter().map(T::c).collect(),
                other if lenient => {
                    log::debug!("skipping `{name}` ({other})");
                    continue;
                }
                other => return Err(bad(format!("`{name}` has unsupported dtype {other}"))),
            };
            if values.len() != numel || raw.len() % if dtype == "F32" { 4 } else { 8 } != 0 {
                return Err(bad(format!("`{name}` holds {} values but its shape {shape:?} needs {numel}", values.len())));
            }
            archive.tensors.push((name, Tensor::from_vec(&shape, values)));
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Tensors of a plain safetensors file, such as converted pretrained
/// backbone weights. Non-float tensors are skipped.
pub fn read_safetensors<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(Archive::parse(&bytes, true)?.tensors)
}

/// Training state beyond the parameters themselves.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointInfo {
    pub step: usize,
    /// Resolved run configuration in its text form.
    pub config: String,
}

pub fn save<T: Scalar>(path: &Path, store: &ParamStore<T>, adam: Option<&Adam<T>>, info: &CheckpointInfo) -> Result<()> {
    let mut a = Archive::default();
    a.metadata.insert("step".into(), info.step.to_string());
    a.metadata.insert("config".into(), info.config.clone());
    for id in store.ids() {
        a.tensors.push((store.name(id).to_string(), store.get(id).clone()));
    }
    if let Some(adam) = adam {
        a.metadata.insert("adam_t".into(), adam.t.to_string());
        for id in store.trainable_ids() {
            a.tensors.push((format!("adam.m.{}", store.name(id)), adam.m[id.0].clone()));
            a.tensors.push((format!("adam.v.{}", store.name(id)), adam.v[id.0].clone()));
        }
    }
    a.save(path)
}

/// Loads parameters into `store`, which must have exactly the archived names
/// and shapes, and optimiser moments into `adam` when both are present.
pub fn load<T: Scalar>(path: &Path, store: &mut ParamStore<T>, adam: Option<&mut Adam<T>>) -> Result<CheckpointInfo> {
    let archive = Archive::<T>::load(path)?;
    let mut by_name: BTreeMap<String, Tensor<T>> = archive.tensors.into_iter().collect();
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let t = by_name.remove(&name).ok_or_else(|| bad(format!("missing parameter `{name}`")))?;
        if t.shape() != store.get(id).shape() {
            return Err(bad(format!("`{name}` has shape {:?}, model expects {:?}", t.shape(), store.get(id).shape())));
        }
        store.set(id, t);
    }
    if let Some(adam) = adam {
        if let Some(t) = archive.metadata.get("adam_t") {
            adam.t = t.parse().map_err(|_| bad("malformed adam_t"))?;
            for id in store.ids().filter(|&id| store.kind(id) == ParamKind::Trainable) {
                for (prefix, slot) in [("adam.m.", &mut adam.m), ("adam.v.", &mut adam.v)] {
                    let key = format!("{prefix}{}", store.name(id));
                    let t = by_name.remove(&key).ok_or_else(|| bad(format!("missing optimiser state `{key}`")))?;
                    if t.shape() != store.get(id).shape() {
                        return Err(bad(format!("`{key}` does not match its parameter's shape")));
                    }
                    slot[id.0] = t;
                }
            }
        }
    }
    by_name.retain(|k, _| !k.starts_with("adam."));
    if let Some(extra) = by_name.keys().next() {
        return Err(bad(format!("unexpected tensor `{extra}` ({} unknown in total)", by_name.len())));
    }
    let step = match archive.metadata.get("step") {
        Some(s) => s.parse().map_err(|_| bad("malformed step"))?,
        None => 0,
    };
    Ok(CheckpointInfo { step, config: archive.metadata.get("config").cloned().unwrap_or_default() })
}
