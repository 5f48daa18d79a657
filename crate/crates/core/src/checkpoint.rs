//! Versioned binary container for named parameter tensors.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                            |
//! |--------------|----------------------------------------------------|
//! | 8            | magic `AMSTCKPT`                                   |
//! | 4            | format version (`1`)                               |
//! | 8            | header length `H`                                  |
//! | H            | UTF-8 JSON header (see [`Header`])                 |
//! | 8 * scalars  | every tensor's values as `f64`, in header order    |
//! | 32           | SHA-256 of all preceding bytes                     |
//!
//! The header records a schema tag (`amst.mask` or `amst.senti_mlm`), a
//! free-form metadata map (hyper-parameters, threshold, vocabulary hash) and
//! the ordered tensor list `{name, rows, cols}`. Names are `<model>/<param>`,
//! e.g. `masker/lstm_fwd.wx.weight`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AMSTCKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const MASK_SCHEMA: &str = "amst.mask";
pub const MLM_SCHEMA: &str = "amst.senti_mlm";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    meta: BTreeMap<String, Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub schema: String,
    pub meta: BTreeMap<String, Value>,
    tensors: Vec<(String, Tensor)>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(schema: &str) -> Self {
        Checkpoint {
            schema: schema.to_string(),
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<Value>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| ckpt_err(format!("missing string metadata `{key}`")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| ckpt_err(format!("missing numeric metadata `{key}`")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| ckpt_err(format!("missing integer metadata `{key}`")))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn has_store(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.iter().any(|(n, _)| n.starts_with(&p))
    }

    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.tensors.push((format!("{prefix}/{name}"), t.clone()));
        }
    }

    /// Fills `store` from the tensors under `prefix`; names and shapes must match exactly.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let p = format!("{prefix}/");
        let found: Vec<(&str, &Tensor)> = self
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s, t)))
            .collect();
        if found.len() != store.len() {
            return Err(ckpt_err(format!(
                "`{prefix}` has {} tensors, model expects {}",
                found.len(),
                store.len()
            )));
        }
        for (name, t) in found {
            store
                .set_by_name(name, t.clone())
                .map_err(|e| ckpt_err(format!("{prefix}: {e}")))?;
        }
        Ok(())
    }

    pub fn expect_schema(&self, schema: &str) -> Result<()> {
        if self.schema != schema {
            return Err(ckpt_err(format!(
                "schema `{}` where `{schema}` was expected",
                self.schema
            )));
        }
        Ok(())
    }

    pub fn expect_vocab(&self, vocab_hash: &str) -> Result<()> {
        let stored = self.meta_str("vocab_hash")?;
        if stored != vocab_hash {
            return Err(ckpt_err(format!(
                "vocabulary hash {stored} does not match {vocab_hash}"
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            schema: self.schema.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 4 + 8 + 32 {
            return Err(ckpt_err("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(ckpt_err("bad magic; not a checkpoint"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(ckpt_err("checksum mismatch; file is corrupted"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(ckpt_err(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let hend = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| ckpt_err("header length out of range"))?;
        let header: Header = serde_json::from_slice(&body[20..hend])
            .map_err(|e| ckpt_err(format!("bad header: {e}")))?;
        let mut cursor = hend;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n = entry.rows * entry.cols;
            let end = cursor + 8 * n;
            if end > body.len() {
                return Err(ckpt_err(format!("tensor `{}` truncated", entry.name)));
            }
            let data = body[cursor..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            cursor = end;
            tensors.push((entry.name, Tensor::from_vec(entry.rows, entry.cols, data)));
        }
        if cursor != body.len() {
            return Err(ckpt_err("trailing bytes after tensor payload"));
        }
        Ok(Checkpoint {
            schema: header.schema,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
