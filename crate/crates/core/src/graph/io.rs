//! Node-embedding file: `URM4G` binary plus a JSON sidecar.
//!
//! Layout (little-endian): magic `URM4G`, u32 version, u32 node count, u32 dim,
//! then per node `u8 type, u32 len, market bytes, u32 len, id bytes`, then the
//! `count × dim` f32 matrix, row-major.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HeteroGraph, NodeKey, NodeType};
use crate::error::FormatError;
use crate::tensor::Mat;

const MAGIC: &[u8; 5] = b"URM4G";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddings {
    keys: Vec<NodeKey>,
    index: HashMap<NodeKey, usize>,
    /// `keys.len() × dim`; values are exactly representable as f32.
    pub matrix: Mat,
}

impl NodeEmbeddings {
    /// Pairs rows of `matrix` with `keys`; values are rounded to f32 so that the
    /// in-memory table matches what a file round trip yields.
    pub fn new(keys: Vec<NodeKey>, mut matrix: Mat) -> Self {
        assert_eq!(keys.len(), matrix.rows, "one row per node");
        for v in &mut matrix.data {
            *v = *v as f32 as f64;
        }
        let index = keys.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        Self { keys, index, matrix }
    }

    pub fn from_graph(graph: &HeteroGraph, center: &Mat) -> Self {
        Self::new(graph.keys().to_vec(), center.clone())
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[NodeKey] {
        &self.keys
    }

    pub fn row_of(&self, key: &NodeKey) -> Option<&[f64]> {
        self.index.get(key).map(|&i| self.matrix.row(i))
    }

    /// H^M for a post: its node row, or zeros when the post is not in the graph.
    pub fn post_context(&self, market: &str, post_id: &str) -> Vec<f64> {
        self.row_of(&NodeKey::new(market, NodeType::Post, post_id))
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.dim()])
    }

    /// Concatenates per-market tables (rows keep their order).
    pub fn merge(parts: Vec<NodeEmbeddings>) -> Self {
        let dim = parts.first().map_or(0, NodeEmbeddings::dim);
        let mut keys = Vec::new();
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(p.dim(), dim, "merged embeddings share a width");
            keys.extend(p.keys);
            data.extend(p.matrix.data);
        }
        let rows = keys.len();
        Self::new(keys, Mat::from_vec(rows, dim, data))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.matrix.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.keys.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for k in &self.keys {
            out.push(k.kind.index() as u8);
            for s in [&k.market, &k.id] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
        for v in &self.matrix.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader(bytes);
        if r.take(5)? != MAGIC {
            return Err(FormatError::BadMagic { expected: "URM4G" });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::VersionMismatch { found: version, expected: VERSION });
        }
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let mut keys = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let kind = *NodeType::ALL
                .get(r.take(1)?[0] as usize)
                .ok_or_else(|| FormatError::CorruptFile("unknown node type".into()))?;
            let market = r.string()?;
            let id = r.string()?;
            keys.push(NodeKey { market, kind, id });
        }
        let mut data = Vec::with_capacity(count * dim);
        for _ in 0..count * dim {
            let v = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as f64;
            if !v.is_finite() {
                return Err(FormatError::CorruptFile("non-finite embedding value".into()));
            }
            data.push(v);
        }
        if !r.0.is_empty() {
            return Err(FormatError::CorruptFile("trailing bytes".into()));
        }
        Ok(Self::new(keys, Mat::from_vec(count, dim, data)))
    }

    pub fn sidecar(&self) -> EmbeddingSidecar {
        EmbeddingSidecar { dim: self.dim(), nodes: self.keys.clone() }
    }
}

/// Maps rows to external ids; row `i` is `nodes[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub dim: usize,
    pub nodes: Vec<NodeKey>,
}

pub(crate) struct Reader<'a>(pub &'a [u8]);

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.0.len() < n {
            return Err(FormatError::CorruptFile("unexpected end of file".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn string(&mut self) -> Result<String, FormatError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| FormatError::CorruptFile("invalid UTF-8".into()))
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| FormatError::io(path, e))?;
    Ok(bytes)
}

pub(crate) fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Writes `path` and `path.json`.
pub fn write_embeddings(emb: &NodeEmbeddings, path: &Path) -> Result<(), FormatError> {
    std::fs::write(path, emb.to_bytes()).map_err(|e| FormatError::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&emb.sidecar())?;
    std::fs::write(&side, json).map_err(|e| FormatError::io(&side, e))
}

/// Reads the binary file; the node table inside it is authoritative.
pub fn read_embeddings(path: &Path) -> Result<NodeEmbeddings, FormatError> {
    NodeEmbeddings::from_bytes(&read_file(path)?)
}
