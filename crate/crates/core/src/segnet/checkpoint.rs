//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "BCPCKPT\0"
//! version      u32 LE   (CHECKPOINT_VERSION)
//! header_len   u32 LE
//! header       JSON     {"net": NetConfig, "iteration": u64, "dtype": "f32"|"f64", "extra": {...}}
//! count        u32 LE
//! count × tensor:
//!   name_len   u32 LE, name (UTF-8)
//!   ndim       u32 LE, dims (ndim × u32 LE)
//!   payload    prod(dims) little-endian floats of `dtype`
//! ```
//! Tensors are written in name order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParams, NetConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"BCPCKPT\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointDtype {
    #[default]
    F32,
    F64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    net: NetConfig,
    iteration: u64,
    dtype: CheckpointDtype,
    #[serde(default)]
    extra: serde_json::Value,
}

/// In-memory checkpoint: network config, iteration and named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub iteration: u64,
    pub extra: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor<f64>>,
}

impl Checkpoint {
    pub fn new(net: NetConfig, iteration: u64) -> Self {
        Self {
            net,
            iteration,
            extra: serde_json::Value::Null,
            tensors: BTreeMap::new(),
        }
    }

    /// Plain model checkpoint.
    pub fn from_params(net: &NetConfig, iteration: u64, params: &ModelParams<f64>) -> Self {
        let mut ck = Self::new(net.clone(), iteration);
        ck.insert_params("", params);
        ck
    }

    pub fn insert_params(&mut self, prefix: &str, params: &ModelParams<f64>) {
        for (name, t) in params.iter() {
            self.tensors.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Parameters stored under `prefix`, validated against the network config.
    pub fn params(&self, prefix: &str) -> Result<ModelParams<f64>> {
        let mut map = BTreeMap::new();
        for (name, _) in self.net.param_shapes() {
            let key = format!("{prefix}{name}");
            let t = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::ParamMismatch(format!("checkpoint lacks `{key}`")))?;
            map.insert(name, t.clone());
        }
        let params = ModelParams::from_map(map);
        params.check_compatible(&ModelParams::zeros(&self.net))?;
        Ok(params)
    }
}

fn encode(ck: &Checkpoint, dtype: CheckpointDtype) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        net: ck.net.clone(),
        iteration: ck.iteration,
        dtype,
        extra: ck.extra.clone(),
    })
    .map_err(|e| Error::InvalidArgument(format!("checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(ck.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ck.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            match dtype {
                CheckpointDtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                CheckpointDtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

/// Write atomically (temp file, then rename).
pub fn save_checkpoint(path: &Path, ck: &Checkpoint, dtype: CheckpointDtype) -> Result<()> {
    let bytes = encode(ck, dtype)?;
    crate::datakit::write_atomic(path, &bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.path,
                format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format(path, "bad magic, not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let hlen = r.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| Error::format(path, format!("header: {e}")))?;
    header.net.validate()?;
    let width = match header.dtype {
        CheckpointDtype::F32 => 4,
        CheckpointDtype::F64 => 8,
    };
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "name")?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u32("ndim")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n * width, &format!("payload of `{name}`"))?;
        let data = match header.dtype {
            CheckpointDtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
                .collect(),
            CheckpointDtype::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                .collect(),
        };
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after last tensor", buf.len() - r.pos),
        ));
    }
    Ok(Checkpoint {
        net: header.net,
        iteration: header.iteration,
        extra: header.extra,
        tensors,
    })
}
