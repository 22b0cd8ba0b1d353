//! Binary tensor container used for checkpoints, datasets, traces, and
//! generated frames.
//!
//! Layout: magic `SCD1`, a little-endian `u64` header length, the JSON header,
//! then the raw little-endian payload of every tensor in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SCD1";

/// A tensor of either supported dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Convert to `T`, exactly when the dtype already matches.
    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            AnyTensor::F32(t) => t.data().iter().for_each(|&v| v.write_le(out)),
            AnyTensor::F64(t) => t.data().iter().for_each(|&v| v.write_le(out)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config: Value,
    pub step: u64,
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
    pub payload_len: u64,
}

/// Named tensors plus a JSON header.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub config: Value,
    pub step: u64,
    pub meta: Value,
    pub tensors: Vec<(String, AnyTensor)>,
}

impl Container {
    pub fn new(kind: &str, config: Value) -> Self {
        Container {
            kind: kind.to_string(),
            config,
            step: 0,
            meta: Value::Null,
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), AnyTensor::from_tensor(t)));
    }

    pub fn get(&self, name: &str) -> Result<&AnyTensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let nbytes = (t.numel() * t.dtype().size()) as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: t.dtype(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            step: self.step,
            meta: self.meta.clone(),
            tensors: entries,
            payload_len: offset,
        };
        let hjson = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + hjson.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        for (_, t) in &self.tensors {
            t.write_payload(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic, not an SCD1 container".into()));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let hend = 12usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format(format!("header length {hlen} exceeds file")))?;
        let header: Header = serde_json::from_slice(&bytes[12..hend])?;
        let payload = &bytes[hend..];
        if (payload.len() as u64) < header.payload_len {
            return Err(Error::Truncated {
                expected: header.payload_len,
                actual: payload.len() as u64,
            });
        }
        let mut expect = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            if e.offset != expect || e.nbytes != (numel * e.dtype.size()) as u64 {
                return Err(Error::Format(format!("inconsistent entry for `{}`", e.name)));
            }
            expect += e.nbytes;
            if expect > header.payload_len {
                return Err(Error::Format(format!("entry `{}` exceeds payload", e.name)));
            }
            let raw = &payload[e.offset as usize..expect as usize];
            let t = match e.dtype {
                DType::F32 => AnyTensor::F32(Tensor::new(&e.shape, raw.chunks_exact(4).map(f32::read_le).collect())?),
                DType::F64 => AnyTensor::F64(Tensor::new(&e.shape, raw.chunks_exact(8).map(f64::read_le).collect())?),
            };
            tensors.push((e.name.clone(), t));
        }
        if expect != header.payload_len {
            return Err(Error::Format("payload length disagrees with entries".into()));
        }
        Ok(Container {
            kind: header.kind,
            config: header.config,
            step: header.step,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "expected a `{kind}` container, found `{}`",
                self.kind
            )))
        }
    }
}

/// Dotted paths of every leaf where two JSON documents differ.
pub fn diff_keys(a: &Value, b: &Value) -> Vec<String> {
    fn walk(a: &Value, b: &Value, path: &str, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(ma), Value::Object(mb)) => {
                let mut keys: Vec<&String> = ma.keys().chain(mb.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if path.is_empty() {
                        k.clone()
                    } else {
                        format!("{path}.{k}")
                    };
                    match (ma.get(k), mb.get(k)) {
                        (Some(x), Some(y)) => walk(x, y, &p, out),
                        _ => out.push(p),
                    }
                }
            }
            _ if a != b => out.push(if path.is_empty() { "<root>".into() } else { path.into() }),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(a, b, "", &mut out);
    out
}
