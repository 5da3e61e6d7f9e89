//! Versioned checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "FLOWCKPT"
//! 8       4     u32 version (currently 1)
//! 12      4     u32 config record length C
//! 16      C     config record (JSON-encoded DenoiserConfig)
//! -       4     u32 parameter count P
//! then P times:
//!         4     u32 name length L
//!         L     parameter name (utf-8)
//!         4     u32 rank R
//!         4*R   u32 dimensions
//!         4*n   f32 values, row-major
//! ```
//!
//! In-memory parameters are always exactly representable in f32 (the
//! optimizer quantizes after each step), so a save/load cycle reproduces the
//! model bit-for-bit.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::CoreError;
use crate::nn::Tensor;
use crate::rng::RngFactory;
use crate::Result;

use super::{DenoiserBackbone, DenoiserConfig};

const MAGIC: &[u8; 8] = b"FLOWCKPT";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, model: &DenoiserBackbone) -> Result<()> {
    let config_json = serde_json::to_vec(model.config())
        .map_err(|e| CoreError::checkpoint(format!("config encode: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config_json);
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, tensor) in model.params().iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for d in tensor.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserBackbone> {
    let origin = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| CoreError::checkpoint(format!("{origin}: {e}")))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        origin: &origin,
    };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(CoreError::checkpoint(format!("{origin}: bad magic")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CoreError::checkpoint(format!(
            "{origin}: unsupported version {version}"
        )));
    }
    let config_len = r.u32()? as usize;
    let config_bytes = r.take(config_len)?;
    let config: DenoiserConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| CoreError::checkpoint(format!("{origin}: config decode: {e}")))?;

    // Scaffold the parameter layout from the config, then fill values.
    let mut model = DenoiserBackbone::new(config, &RngFactory::new(0))?;
    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(CoreError::checkpoint(format!(
            "{origin}: {count} parameters, config wants {}",
            model.params().len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CoreError::checkpoint(format!("{origin}: non-utf8 name")))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let raw = r.take(4)?;
            data.push(f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]) as f64);
        }
        let slot = model.params_mut().get_mut(&name).ok_or_else(|| {
            CoreError::checkpoint(format!("{origin}: unknown parameter {name}"))
        })?;
        if slot.shape() != shape.as_slice() {
            return Err(CoreError::checkpoint(format!(
                "{origin}: {name} has shape {shape:?}, want {:?}",
                slot.shape()
            )));
        }
        *slot = Tensor::from_vec(&shape, data);
    }
    if r.pos != bytes.len() {
        return Err(CoreError::checkpoint(format!(
            "{origin}: {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::checkpoint(format!("{}: truncated", self.origin)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
