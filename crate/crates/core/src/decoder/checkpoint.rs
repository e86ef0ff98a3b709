//! `R3DW` checkpoints: config plus named parameter blocks, little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{DecoderConfig, Model};
use crate::error::{Error, Result};
use crate::numerics::nn::Module;
use crate::numerics::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"R3DW";

pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let mut blocks = Vec::new();
    model.visit(&mut |p| blocks.push((p.name().to_string(), p.value().clone())));
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, value) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Parse("truncated R3DW checkpoint".into()))?;
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
}

/// Parses a checkpoint; with `expected`, a differing stored config is an error.
pub fn checkpoint_from_bytes(bytes: &[u8], expected: Option<&DecoderConfig>) -> Result<Model> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Parse("not an R3DW checkpoint".into()));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::validation("checkpoint.version", format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let config: DecoderConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Parse(format!("checkpoint config: {e}")))?;
    if let Some(want) = expected {
        if want != &config {
            return Err(Error::validation(
                "config",
                format!("checkpoint was trained with {config:?}, caller expects {want:?}"),
            ));
        }
    }
    let count = r.u32()? as usize;
    let mut blocks = HashMap::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Parse("parameter name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = r
            .take(len.checked_mul(8).ok_or_else(|| Error::Parse("parameter too large".into()))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse("trailing bytes after R3DW payload".into()));
    }

    let mut model = Model::new(config, 0)?;
    let mut failure = None;
    model.visit_mut(&mut |p| {
        if failure.is_some() {
            return;
        }
        match blocks.remove(p.name()) {
            Some(t) => {
                if let Err(e) = p.set(t) {
                    failure = Some(e);
                }
            }
            None => failure = Some(Error::validation("checkpoint", format!("missing parameter {}", p.name()))),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = blocks.keys().min() {
        return Err(Error::validation("checkpoint", format!("unexpected parameter {extra}")));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&DecoderConfig>) -> Result<Model> {
    checkpoint_from_bytes(&fs::read(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let m = Model::new(DecoderConfig::default(), 3).unwrap();
        let back = checkpoint_from_bytes(&checkpoint_bytes(&m), Some(m.config())).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let m = Model::new(DecoderConfig::default(), 3).unwrap();
        let other = DecoderConfig {
            queries: 9,
            ..DecoderConfig::default()
        };
        let err = checkpoint_from_bytes(&checkpoint_bytes(&m), Some(&other)).unwrap_err();
        assert!(matches!(err, Error::Validation { ref field, .. } if field == "config"));
    }

    #[test]
    fn corrupt_input_is_a_parse_error() {
        let m = Model::new(DecoderConfig::default(), 3).unwrap();
        let bytes = checkpoint_bytes(&m);
        assert!(matches!(checkpoint_from_bytes(&bytes[..bytes.len() - 3], None), Err(Error::Parse(_))));
        assert!(matches!(checkpoint_from_bytes(b"R3DS", None), Err(Error::Parse(_))));
    }
}
