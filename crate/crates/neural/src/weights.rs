//! Binary weights file: `OLSR`, u32 version, u32 tensor count, then per
//! tensor a u16 name length, the UTF-8 name, a u8 rank, u32 dims and
//! little-endian f32 data; the model config follows as JSON.

use std::path::Path;

use crate::config::ModelConfig;
use crate::params::{ModelParams, ParamSet};
use crate::{NeuralError, Result};

pub const MAGIC: &[u8; 4] = b"OLSR";
pub const VERSION: u32 = 1;

pub fn to_bytes(params: &ModelParams<f32>) -> Result<Vec<u8>> {
    let t = &params.tensors;
    let mut out = Vec::with_capacity(16 + 4 * t.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.len() as u32).to_le_bytes());
    for i in 0..t.len() {
        let name = t.names[i].as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| NeuralError::Format(format!("tensor name `{}` too long", t.names[i])))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.shapes[i].len() as u8);
        for &d in &t.shapes[i] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.values[i] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(&params.config).map_err(|e| NeuralError::Format(e.to_string()))?;
    out.extend_from_slice(&json);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            NeuralError::Format(format!("truncated file while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(NeuralError::Format("bad magic, not a weights file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(NeuralError::Format(format!(
            "unsupported weights version {version}, this build reads version {VERSION}"
        )));
    }
    let count = r.u32("tensor count")? as usize;
    let mut set = ParamSet::new();
    for i in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| NeuralError::Format(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let ndim = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| NeuralError::Format(format!("tensor `{name}` is too large")))?;
        let data = r
            .take(n, &format!("tensor `{name}`"))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        set.names.push(name);
        set.shapes.push(shape);
        set.values.push(data);
    }
    let config: ModelConfig = serde_json::from_slice(&bytes[r.pos..])
        .map_err(|e| NeuralError::Format(format!("embedded config: {e}")))?;
    ModelParams::from_parts(config, set)
}

pub fn save_params(path: &Path, params: &ModelParams<f32>) -> Result<()> {
    lumisr_core::io::write_atomic(path, &to_bytes(params)?)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = std::fs::read(path).map_err(|source| NeuralError::Io {
        path: path.into(),
        source,
    })?;
    from_bytes(&bytes)
}
