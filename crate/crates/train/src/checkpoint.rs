//! Checkpoint container in the safetensors layout:
//!
//! ```text
//! u64 LE  header length N
//! N bytes JSON header, space-padded to a multiple of 8:
//!         { "__metadata__": { "format": "zebra-checkpoint", "model_spec": <json>,
//!                             "zebra": <json>, "gated": "true", "folded": "false",
//!                             "gates": <json [{"layer_id", "channels"}]>, ... },
//!           "<tensor>": { "dtype": "F32" | "U8", "shape": [..], "data_offsets": [begin, end] }, ... }
//! data    tensors back to back, little-endian, offsets relative to the data start
//! ```
//!
//! Tensor names follow the layer names (`conv1.weight`, `conv1.bn.running_var`,
//! `conv1.head.weight`, ...). Weight-pruning masks are stored as U8 tensors
//! named `<weight>.prune_mask`; folded gates store `<layer_id>.thresholds`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use zebra_core::ZebraConfig;

use crate::error::{Result, TrainError};
use crate::network::{ModelSpec, Network};

pub const FORMAT: &str = "zebra-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "F32",
            TensorData::U8(_) => "U8",
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len() * 4,
            TensorData::U8(v) => v.len(),
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateInfo {
    pub layer_id: String,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub zebra: ZebraConfig,
    pub gated: bool,
    pub folded: bool,
    pub gates: Vec<GateInfo>,
    /// Free-form string metadata (run name, seed, ...).
    pub extra: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

fn err(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_network(net: &Network, zebra: &ZebraConfig) -> Self {
        let mut net = net.clone();
        let mut tensors = BTreeMap::new();
        net.visit_state(&mut |name, shape, data| {
            tensors.insert(name.to_string(), StoredTensor { shape: shape.to_vec(), data: TensorData::F32(data.clone()) });
        });
        net.visit_masks(&mut |name, mask| {
            if let Some(m) = mask {
                tensors.insert(
                    format!("{name}.prune_mask"),
                    StoredTensor { shape: vec![m.len()], data: TensorData::U8(m.iter().map(|&k| k as u8).collect()) },
                );
            }
        });
        let folded = net.is_gated() && net.is_folded();
        if folded {
            for g in net.gates() {
                tensors.insert(
                    format!("{}.thresholds", g.layer_id()),
                    StoredTensor { shape: vec![g.channels()], data: TensorData::F32(g.state.thresholds.clone()) },
                );
            }
        }
        Self {
            spec: net.spec.clone(),
            zebra: zebra.clone(),
            gated: net.is_gated(),
            folded,
            gates: net.gates().iter().map(|g| GateInfo { layer_id: g.layer_id().into(), channels: g.channels() }).collect(),
            extra: BTreeMap::new(),
            tensors,
        }
    }

    /// Rebuilds the network, restoring every stored tensor and mask.
    pub fn to_network(&self) -> Result<Network> {
        let zebra = self.gated.then_some(&self.zebra);
        let mut net = Network::new(self.spec.clone(), zebra, &mut ChaCha8Rng::seed_from_u64(0))?;
        if self.folded {
            net.fold(&self.zebra);
        }
        let mut failure = None;
        net.visit_state(&mut |name, shape, data| {
            if failure.is_some() {
                return;
            }
            match self.tensors.get(name) {
                Some(StoredTensor { shape: s, data: TensorData::F32(v) }) if s == shape && v.len() == data.len() => {
                    data.copy_from_slice(v);
                }
                Some(_) => failure = Some(err(format!("tensor `{name}` has the wrong shape or dtype"))),
                None => failure = Some(err(format!("missing tensor `{name}`"))),
            }
        });
        net.visit_masks(&mut |name, slot| {
            if let Some(StoredTensor { data: TensorData::U8(v), .. }) = self.tensors.get(&format!("{name}.prune_mask")) {
                *slot = Some(v.iter().map(|&b| b != 0).collect());
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if self.folded {
            for g in net.gates_mut() {
                if let Some(StoredTensor { data: TensorData::F32(v), .. }) = self.tensors.get(&format!("{}.thresholds", g.layer_id())) {
                    if v.len() != g.channels() {
                        return Err(err(format!("thresholds of `{}` have the wrong length", g.layer_id())));
                    }
                    g.state.thresholds.clone_from(v);
                }
            }
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = serde_json::Map::new();
        meta.insert("format".into(), FORMAT.into());
        meta.insert("model_spec".into(), serde_json::to_string(&self.spec).expect("spec serializes").into());
        meta.insert("zebra".into(), serde_json::to_string(&self.zebra).expect("config serializes").into());
        meta.insert("gated".into(), self.gated.to_string().into());
        meta.insert("folded".into(), self.folded.to_string().into());
        meta.insert("gates".into(), serde_json::to_string(&self.gates).expect("gates serialize").into());
        for (k, v) in &self.extra {
            meta.insert(format!("extra.{k}"), v.clone().into());
        }
        let mut header = serde_json::Map::new();
        header.insert("__metadata__".into(), Value::Object(meta));
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let end = offset + t.data.byte_len();
            header.insert(name.clone(), json!({"dtype": t.data.dtype(), "shape": t.shape, "data_offsets": [offset, end]}));
            offset = end;
        }
        let mut head = Value::Object(header).to_string().into_bytes();
        while head.len() % 8 != 0 {
            head.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + head.len() + offset);
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        for t in self.tensors.values() {
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(err("shorter than the 8-byte header length"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let data = bytes.get(8 + n..).ok_or_else(|| err(format!("header length {n} exceeds file size")))?;
        let header: serde_json::Map<String, Value> =
            serde_json::from_slice(&bytes[8..8 + n]).map_err(|e| err(format!("header: {e}")))?;
        let meta = header.get("__metadata__").and_then(Value::as_object).ok_or_else(|| err("missing __metadata__"))?;
        let field = |k: &str| meta.get(k).and_then(Value::as_str).ok_or_else(|| err(format!("missing metadata `{k}`")));
        if field("format")? != FORMAT {
            return Err(err("not a zebra checkpoint"));
        }
        let spec: ModelSpec = serde_json::from_str(field("model_spec")?).map_err(|e| err(format!("model_spec: {e}")))?;
        let zebra: ZebraConfig = serde_json::from_str(field("zebra")?).map_err(|e| err(format!("zebra: {e}")))?;
        let flag = |k: &str| -> Result<bool> { field(k)?.parse().map_err(|_| err(format!("metadata `{k}` is not a bool"))) };
        let (gated, folded) = (flag("gated")?, flag("folded")?);
        let gates: Vec<GateInfo> = serde_json::from_str(field("gates")?).map_err(|e| err(format!("gates: {e}")))?;
        let extra = meta
            .iter()
            .filter_map(|(k, v)| Some((k.strip_prefix("extra.")?.to_string(), v.as_str()?.to_string())))
            .collect();
        let mut tensors = BTreeMap::new();
        let mut covered = 0usize;
        for (name, info) in header.iter().filter(|(k, _)| *k != "__metadata__") {
            let dtype = info.get("dtype").and_then(Value::as_str).ok_or_else(|| err(format!("`{name}`: dtype")))?;
            let shape: Vec<usize> = serde_json::from_value(info.get("shape").cloned().unwrap_or(Value::Null))
                .map_err(|_| err(format!("`{name}`: shape")))?;
            let offs: [usize; 2] = serde_json::from_value(info.get("data_offsets").cloned().unwrap_or(Value::Null))
                .map_err(|_| err(format!("`{name}`: data_offsets")))?;
            let raw = data
                .get(offs[0]..offs[1])
                .ok_or_else(|| err(format!("`{name}`: offsets {offs:?} outside {} data bytes", data.len())))?;
            let numel: usize = shape.iter().product();
            let t = match dtype {
                "F32" => TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
                "U8" => TensorData::U8(raw.to_vec()),
                other => return Err(err(format!("`{name}`: unsupported dtype {other}"))),
            };
            if t.len() != numel || t.byte_len() != raw.len() {
                return Err(err(format!("`{name}`: {} bytes for shape {shape:?}", raw.len())));
            }
            covered += raw.len();
            tensors.insert(name.clone(), StoredTensor { shape, data: t });
        }
        if covered != data.len() {
            return Err(err(format!("{} data bytes not covered by any tensor", data.len() - covered.min(data.len()))));
        }
        Ok(Self { spec, zebra, gated, folded, gates, extra, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| TrainError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
