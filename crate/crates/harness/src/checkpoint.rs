//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "GFTCKPT\0" | version u8 | meta_len u32 | meta (UTF-8 key=value lines)
//! count u32 | count × { name_len u32 | name | dtype u8 | frozen u8 |
//!                       ndim u32 | ndim × u64 | f32 payload }
//! ```
//!
//! The metadata block is the rendered model configuration, which is enough
//! to rebuild the parameter layout before the tensors are checked against it.

use std::fs;
use std::path::Path;

use gft_core::numcore::Tensor;
use gft_core::{GftModel, ParamStore};

use crate::config::{parse_model_config, render_model_config};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GFTCKPT\0";
pub const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode_checkpoint(model: &GftModel<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let meta = render_model_config(&model.config);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(p.frozen as u8);
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::format(self.path, "dimension overflows usize"))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::format(self.path, "invalid UTF-8"))
    }
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<GftModel<f32>> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()?;
    let meta = r.str(meta_len)?;
    let config = parse_model_config(path, meta)?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()?;
        let name = r.str(n)?.to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(path, format!("tensor {name}: unknown dtype {dtype}")));
        }
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(Error::format(path, format!("tensor {name}: bad frozen flag {f}"))),
        };
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(path, format!("tensor {name}: shape overflows")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::format(path, "payload overflows"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        store.insert(name, Tensor::new(shape, data)?, frozen)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut model = GftModel::new(config, 0)?;
    model.load_store(store)?;
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &GftModel<f32>) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<GftModel<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes)
}
