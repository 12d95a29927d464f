//! Binary checkpoint format.
//!
//! ```text
//! "XAQA"                     magic
//! u32                        format version
//! u32 × 8                    vocab_size, d_model, n_heads, n_enc_layers,
//!                            n_dec_layers, d_ff, max_seq_len, max_decode_len
//! u32                        parameter count
//! per parameter:
//!   u32, [u8]                name length, UTF-8 name
//!   u32, u32 × rank          rank, dims
//!   f64 × Π dims             values
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Result, XaqaError};
use crate::tensor::Tensor;

use super::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XAQA";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| XaqaError::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes a model to checkpoint bytes.
pub fn write_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let c = &model.config;
    let mut out = Vec::with_capacity(64 + model.num_parameters() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        c.vocab_size,
        c.d_model,
        c.n_heads,
        c.n_enc_layers,
        c.n_dec_layers,
        c.d_ff,
        c.max_seq_len,
        c.max_decode_len,
    ] {
        put_u32(&mut out, v)?;
    }
    put_u32(&mut out, model.params.len())?;
    for (name, t) in model.params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(XaqaError::Checkpoint("unexpected end of checkpoint".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses checkpoint bytes back into a model.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(XaqaError::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(XaqaError::Checkpoint(format!("unsupported format version {version}")));
    }
    let config = ModelConfig {
        vocab_size: r.u32()?,
        d_model: r.u32()?,
        n_heads: r.u32()?,
        n_enc_layers: r.u32()?,
        n_dec_layers: r.u32()?,
        d_ff: r.u32()?,
        max_seq_len: r.u32()?,
        max_decode_len: r.u32()?,
    };
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| XaqaError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| XaqaError::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(name, Tensor::new(shape, data)?);
    }
    if !r.buf.is_empty() {
        return Err(XaqaError::Checkpoint(format!("{} trailing bytes", r.buf.len())));
    }
    Model::from_params(config, params)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(model)?;
    let mut f = fs::File::create(path).map_err(|e| XaqaError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| XaqaError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| XaqaError::io(path, e))?;
    read_checkpoint(&bytes)
}
