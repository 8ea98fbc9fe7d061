//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "SPONGECK"
//! version      u32       1
//! header_len   u64
//! header       JSON      {input_shape, num_classes, seed, layers}
//! param_count  u64
//! per param:   name_len u64, name (UTF-8), rank u64, extents u64 × rank,
//!              data f64 × product(extents)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerSpec, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SPONGECK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    num_classes: usize,
    seed: u64,
    layers: Vec<LayerSpec>,
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        input_shape: model.input_shape().to_vec(),
        num_classes: model.num_classes(),
        seed: model.seed(),
        layers: model.layers().to_vec(),
    })?;
    let mut out = Vec::with_capacity(64 + header.len() + model.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params().len() as u64).to_le_bytes());
    for (name, t) in model.params() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Format {
            what: "checkpoint",
            detail: format!("truncated at byte {}", self.pos),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Format {
                what: "checkpoint",
                detail: format!("implausible length {v}"),
            })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let bad = |detail: String| Error::Format { what: "checkpoint", detail };
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let header_len = r.len()?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)?;
    let count = r.len()?;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| bad(format!("parameter name: {e}")))?
            .to_owned();
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= bytes.len() / 8)
            .ok_or_else(|| bad(format!("{name}: implausible shape {shape:?}")))?;
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)?;
        if params.insert(name.clone(), t).is_some() {
            return Err(bad(format!("duplicate parameter {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Model::from_parts(&header.input_shape, header.num_classes, header.layers, params, header.seed)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
