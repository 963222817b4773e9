//! Checkpoints and trace dumps, both safetensors files with a JSON metadata
//! entry.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::generate::GenerationTrace;
use super::{Network, TrainState};
use crate::error::{Error, Result};
use crate::grammar::ExpertKind;
use crate::model::{BackboneConfig, Decoder, Vocab};
use crate::projection::{HeadDims, HeadSet};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const META_KEY: &str = "glimpse.meta";
const TRACES_KEY: &str = "glimpse.traces";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub backbone: BackboneConfig,
    pub slots: usize,
    pub head_dims: HeadDims,
    pub vocab: Vec<String>,
    pub history: Vec<u8>,
    pub train_state: Option<TrainState>,
    pub config_hash: String,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub network: Network,
}

fn ck(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

fn write(path: &Path, tensors: Vec<(String, Tensor)>, key: &str, meta: String) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let header = HashMap::from([(key.to_string(), meta)]);
    safetensors::serialize_to_file(tensors, Some(header), path).map_err(ck)
}

fn read(path: &Path, key: &str, device: &Device) -> Result<(String, HashMap<String, Tensor>)> {
    let bytes = fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(ck)?;
    let meta = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(key))
        .cloned()
        .ok_or_else(|| Error::Checkpoint(format!("{} has no {key} entry", path.display())))?;
    Ok((meta, candle_core::safetensors::load_buffer(&bytes, device)?))
}

pub fn save_checkpoint(path: &Path, net: &Network, config_hash: &str) -> Result<()> {
    let meta = CheckpointMeta {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        backbone: net.decoder.cfg.clone(),
        slots: net.slots,
        head_dims: net.head_dims(),
        vocab: net.decoder.vocab.tokens().to_vec(),
        history: net.history.clone(),
        train_state: net.train_state.clone(),
        config_hash: config_hash.to_string(),
    };
    write(path, net.named_tensors(), META_KEY, serde_json::to_string(&meta)?)
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let (raw, tensors) = read(path, META_KEY, device)?;
    let version: serde_json::Value = serde_json::from_str(&raw)?;
    match version.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_SCHEMA_VERSION as u64 => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "checkpoint schema {other:?}, this build reads {CHECKPOINT_SCHEMA_VERSION}"
            )))
        }
    }
    let meta: CheckpointMeta = serde_json::from_value(version).map_err(ck)?;
    let decoder = Decoder::new(meta.backbone.clone(), Vocab::from_tokens(meta.vocab.clone())?, 0, DType::F32, device)?;
    let heads = HeadSet::new(meta.head_dims, 0, DType::F32, device)?;

    let mut backbone = BTreeMap::new();
    let mut head_tensors = BTreeMap::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix("backbone.") {
            backbone.insert(rest.to_string(), t);
        } else {
            head_tensors.insert(name, t);
        }
    }
    decoder.params.load(&backbone)?;
    for (name, var) in heads.params() {
        let t = head_tensors
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {name}")))?;
        if t.dims() != var.dims() {
            return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {:?}", t.dims(), var.dims())));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    let network = Network {
        decoder,
        heads,
        slots: meta.slots,
        history: meta.history.clone(),
        train_state: meta.train_state.clone(),
    };
    Ok(Checkpoint { meta, network })
}

/// One generated trace as dumped to disk; span `j`'s prediction is stored
/// under the tensor name `trace.{index}.span.{j}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub index: usize,
    pub question: String,
    pub chain: String,
    pub answer: String,
    pub expected: Option<String>,
    pub spans: Vec<ExpertKind>,
    #[serde(skip)]
    pub predictions: Vec<Tensor>,
}

impl TraceRecord {
    pub fn from_trace(index: usize, question: &str, expected: Option<&str>, trace: &GenerationTrace) -> Self {
        Self {
            index,
            question: question.to_string(),
            chain: trace.chain.serialize(),
            answer: trace.answer.clone(),
            expected: expected.map(str::to_string),
            spans: trace.predictions.iter().map(|p| p.expert).collect(),
            predictions: trace.predictions.iter().map(|p| p.values.clone()).collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceHeader {
    schema_version: u32,
    config_hash: String,
    records: Vec<TraceRecord>,
}

pub fn write_traces(path: &Path, records: &[TraceRecord], config_hash: &str) -> Result<()> {
    let mut tensors = Vec::new();
    for r in records {
        if r.predictions.len() != r.spans.len() {
            return Err(Error::Checkpoint(format!("trace {} has {} spans but {} predictions", r.index, r.spans.len(), r.predictions.len())));
        }
        for (j, t) in r.predictions.iter().enumerate() {
            tensors.push((format!("trace.{}.span.{j}", r.index), t.clone()));
        }
    }
    let header = TraceHeader {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        records: records.to_vec(),
    };
    write(path, tensors, TRACES_KEY, serde_json::to_string(&header)?)
}

/// Returns the config hash and the records with their prediction tensors.
pub fn read_traces(path: &Path) -> Result<(String, Vec<TraceRecord>)> {
    let (raw, mut tensors) = read(path, TRACES_KEY, &Device::Cpu)?;
    let header: TraceHeader = serde_json::from_str(&raw).map_err(ck)?;
    if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!("trace schema {} unsupported", header.schema_version)));
    }
    let mut records = header.records;
    for r in &mut records {
        r.predictions = (0..r.spans.len())
            .map(|j| {
                let name = format!("trace.{}.span.{j}", r.index);
                tensors.remove(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
            })
            .collect::<Result<_>>()?;
    }
    Ok((header.config_hash, records))
}
