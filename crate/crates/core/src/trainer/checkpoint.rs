//! `URM4C` checkpoint file.
//!
//! Layout (little-endian): magic `URM4C`, u32 version, u32 meta length, meta
//! JSON, u32 tensor count, then per tensor `u32 name length, name, u8 dtype
//! (0 = f32), u32 rank, u32 dims…, f32 data`; finally a CRC32 of every
//! preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::episode_model::UrmModel;
use crate::error::FormatError;
use crate::graph::io::{read_file, Reader};
use crate::nn::Params;

const MAGIC: &[u8; 5] = b"URM4C";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// A referenced input file and its SHA-256.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: TrainConfig,
    pub model: UrmModel,
    pub vocab: Option<FileRef>,
    pub graph: Option<FileRef>,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadMeta {
    task: String,
    labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: TrainConfig,
    heads: Vec<HeadMeta>,
    vocab: Option<FileRef>,
    graph: Option<FileRef>,
    step: u64,
}

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            config: self.config.clone(),
            heads: self.model.heads.iter().map(|h| HeadMeta { task: h.task.clone(), labels: h.labels.clone() }).collect(),
            vocab: self.vocab.clone(),
            graph: self.graph.clone(),
            step: self.step,
        };
        let meta = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
        let tensors = self.model.named();

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, m) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(m.rows as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols as u32).to_le_bytes());
            for v in &m.data {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let corrupt = |m: &str| FormatError::CorruptFile(m.to_string());
        let mut r = Reader(bytes);
        if r.take(5)? != MAGIC {
            return Err(FormatError::BadMagic { expected: "URM4C" });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        if bytes.len() < 13 {
            return Err(corrupt("unexpected end of file"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader(&body[9..]);
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
        let heads = meta.heads.into_iter().map(|h| (h.task, h.labels)).collect();
        let mut model = UrmModel::new(meta.config.model.clone(), heads, 0)
            .map_err(|e| FormatError::CorruptFile(format!("stored config is invalid: {e}")))?;

        let count = r.u32()? as usize;
        let mut slots = model.named_mut();
        if count != slots.len() {
            return Err(FormatError::CorruptFile(format!("{count} tensors stored, model has {}", slots.len())));
        }
        for (name, m) in slots.iter_mut() {
            let stored = r.string()?;
            if &stored != name {
                return Err(FormatError::CorruptFile(format!("expected tensor `{name}`, found `{stored}`")));
            }
            if r.take(1)?[0] != DTYPE_F32 {
                return Err(corrupt("unsupported tensor dtype"));
            }
            if r.u32()? != 2 {
                return Err(corrupt("unsupported tensor rank"));
            }
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            if (rows, cols) != m.shape() {
                return Err(FormatError::CorruptFile(format!("tensor `{name}` has shape {rows}×{cols}")));
            }
            for v in m.data.iter_mut() {
                *v = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as f64;
            }
        }
        drop(slots);
        if !r.0.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { config: meta.config, model, vocab: meta.vocab, graph: meta.graph, step: meta.step })
    }
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<(), FormatError> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| FormatError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, FormatError> {
    ModelCheckpoint::from_bytes(&read_file(path)?)
}
