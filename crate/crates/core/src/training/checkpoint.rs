//! Binary checkpoint files.
//!
//! Layout (little-endian): `CWDK`, format version u32, entry count u32, then
//! per entry: name length u32, UTF-8 name, rank u32, extents u64 × rank and
//! f32 data; finally a 64-bit FNV-1a hash of every preceding byte. The first
//! entry, `__meta`, is a rank-1 byte payload of `key=value` lines.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use diac_tensor::{RngStream, Tensor};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 4] = b"CWDK";
const VERSION: u32 = 1;
const META: &str = "__meta";

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn model_fingerprint(model: &ModelConfig) -> String {
    format!("{:016x}", fnv1a64(model.to_key_values().as_bytes()))
}

/// Hash of the model and training configurations together.
pub fn run_fingerprint(model: &ModelConfig, train: &TrainConfig) -> String {
    let text = model.to_key_values() + &train.to_key_values();
    format!("{:016x}", fnv1a64(text.as_bytes()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub fingerprint: String,
    pub model_fingerprint: String,
}

impl CheckpointMeta {
    pub fn new(model: &ModelConfig, train: &TrainConfig, epoch: usize) -> Self {
        Self {
            seed: train.seed,
            epoch,
            fingerprint: run_fingerprint(model, train),
            model_fingerprint: model_fingerprint(model),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn entry_header(&mut self, name: &str, shape: &[usize]) {
        self.u32(name.len() as u32);
        self.0.extend_from_slice(name.as_bytes());
        self.u32(shape.len() as u32);
        for &d in shape {
            self.0.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(model: &Model<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let meta_text = format!(
        "seed={}\nepoch={}\nfingerprint={}\nmodel_fingerprint={}\nmodel_config={}\n",
        meta.seed,
        meta.epoch,
        meta.fingerprint,
        meta.model_fingerprint,
        serde_json::to_string(model.config()).expect("config serializes")
    );
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(model.params().len() as u32 + 1);
    w.entry_header(META, &[meta_text.len()]);
    w.0.extend_from_slice(meta_text.as_bytes());
    for p in model.params().iter() {
        w.entry_header(&p.name, p.value.shape());
        for v in p.value.data() {
            w.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    let hash = fnv1a64(&w.0);
    w.0.extend_from_slice(&hash.to_le_bytes());
    w.0
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, encode_checkpoint(model, meta)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn entry_header(&mut self) -> Result<(String, Vec<usize>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        Ok((name, shape))
    }
}

fn parse_meta(text: &str) -> Result<(CheckpointMeta, ModelConfig)> {
    let fields: HashMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {k}")));
    let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| Error::Format(format!("bad {k} in checkpoint metadata"))) };
    let config: ModelConfig = serde_json::from_str(get("model_config")?)
        .map_err(|e| Error::Format(format!("bad model_config in checkpoint metadata: {e}")))?;
    let meta = CheckpointMeta {
        seed: num("seed")?,
        epoch: num("epoch")? as usize,
        fingerprint: get("fingerprint")?.to_string(),
        model_fingerprint: get("model_fingerprint")?.to_string(),
    };
    Ok((meta, config))
}

/// Decodes a checkpoint. With `expected`, the stored model configuration must
/// have the same fingerprint.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    if fnv1a64(body) != u64::from_le_bytes(trailer.try_into().expect("8 bytes")) {
        return Err(Error::Format("checkpoint checksum mismatch (file corrupted or truncated)".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let (name, shape) = r.entry_header()?;
    if name != META || shape.len() != 1 {
        return Err(Error::Format("checkpoint does not start with metadata".into()));
    }
    let meta_text = std::str::from_utf8(r.take(shape[0])?).map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
    let (meta, config) = parse_meta(meta_text)?;
    if model_fingerprint(&config) != meta.model_fingerprint {
        return Err(Error::Format("metadata fingerprint does not match stored model config".into()));
    }
    if let Some(expected) = expected {
        let want = model_fingerprint(expected);
        if want != meta.model_fingerprint {
            return Err(Error::Fingerprint { expected: want, found: meta.model_fingerprint });
        }
    }
    let mut model = Model::new(config, &mut RngStream::new(0))?;
    if count != model.params().len() + 1 {
        return Err(Error::Format(format!("checkpoint has {} tensors, model needs {}", count - 1, model.params().len())));
    }
    for _ in 1..count {
        let (name, shape) = r.entry_header()?;
        let id = model.params().id(&name).ok_or_else(|| Error::Format(format!("unknown tensor {name}")))?;
        if model.params().get(id).value.shape() != shape.as_slice() {
            return Err(Error::Format(format!("tensor {name} has shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        *model.params_mut().value_mut(id) = Tensor::new(shape, data)?;
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(Checkpoint { model, meta })
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}
