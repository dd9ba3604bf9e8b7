//! Binary checkpoint container.
//!
//! Layout: magic `SPLF`, version u32, a length-prefixed JSON header (model
//! configuration or policy metadata), then per-tensor records of
//! `(name_len u32, name bytes, rank u32, dims u64..., values f32...)` until
//! end of file. All integers and floats are little-endian. Values are stored
//! at 32-bit precision; in-memory math stays 64-bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::TensorValue;
use crate::error::{Error, Result};
use crate::model::{ParamStore, SplineTransformer};
use crate::transformer::ModelConfig;

const MAGIC: &[u8; 4] = b"SPLF";
const VERSION: u32 = 1;

pub fn save_checkpoint(
    path: &Path,
    header: &serde_json::Value,
    params: &[(String, TensorValue)],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let header_bytes = serde_json::to_vec(header)?;
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (name, value) in params {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(value.shape.len() as u32).to_le_bytes());
        for &d in &value.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &value.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<(String, TensorValue)>)> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("wrong magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header: serde_json::Value = serde_json::from_slice(r.take(header_len)?)?;
    let mut params = Vec::new();
    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let bytes: [u8; 4] = r.take(4)?.try_into().unwrap();
            data.push(f64::from(f32::from_le_bytes(bytes)));
        }
        params.push((name, TensorValue::new(shape, data)));
    }
    Ok((header, params))
}

pub fn save_model(path: &Path, model: &SplineTransformer) -> Result<()> {
    let header = serde_json::json!({
        "kind": "model",
        "model_config": model.cfg,
    });
    save_checkpoint(path, &header, model.params.entries())
}

pub fn load_model(path: &Path) -> Result<SplineTransformer> {
    let (header, params) = load_checkpoint(path)?;
    if header["kind"] != "model" {
        return Err(Error::Checkpoint(format!(
            "expected a model checkpoint, found kind {}",
            header["kind"]
        )));
    }
    let cfg: ModelConfig = serde_json::from_value(header["model_config"].clone())?;
    cfg.validate()?;
    Ok(SplineTransformer {
        cfg,
        params: ParamStore::from_entries(params),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::ModelConfig;

    #[test]
    fn round_trip_preserves_structure_and_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = SplineTransformer::init(ModelConfig::gradcheck(), 3).unwrap();
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.cfg, model.cfg);
        assert_eq!(back.params.entries().len(), model.params.entries().len());
        for ((n1, v1), (n2, v2)) in model.params.entries().iter().zip(back.params.entries()) {
            assert_eq!(n1, n2);
            assert_eq!(v1.shape, v2.shape);
            for (a, b) in v1.data.iter().zip(&v2.data) {
                assert!((a - b).abs() <= (a.abs() * 1e-7).max(1e-7), "{n1}: {a} vs {b}");
            }
        }
        // loading twice is bit-identical
        let again = load_model(&path).unwrap();
        for ((_, v1), (_, v2)) in back.params.entries().iter().zip(again.params.entries()) {
            assert_eq!(v1.data, v2.data);
        }
    }

    #[test]
    fn bad_magic_is_a_header_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE____junk").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("bad checkpoint header"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let model = SplineTransformer::init(ModelConfig::gradcheck(), 3).unwrap();
        save_model(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
