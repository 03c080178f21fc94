//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MMFUSECK"
//! version    u32      1
//! config     u32 length + UTF-8 JSON of the model config
//! count      u32      number of tensors
//! tensor*    u32 name length, name bytes, u8 dtype (0 = f32, 1 = f64),
//!            u32 rows, u32 cols, row-major payload
//! ```

use std::fs;
use std::path::Path;

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::Precision;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMFUSECK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let config = serde_json::to_vec(&model.config).expect("serializable");
    put_u32(&mut out, config.len() as u32);
    out.extend_from_slice(&config);
    let ids: Vec<_> = model.store.ids().collect();
    put_u32(&mut out, ids.len() as u32);
    for id in ids {
        let name = model.store.name(id).as_bytes();
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name);
        let value = model.store.value(id);
        out.push(match model.config.precision {
            Precision::F32 => 0,
            Precision::F64 => 1,
        });
        put_u32(&mut out, value.nrows() as u32);
        put_u32(&mut out, value.ncols() as u32);
        for v in value.iter() {
            match model.config.precision {
                Precision::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::Checkpoint(format!("bad config block: {e}")))?;
    let mut model = Model::new(config, 0)?;
    let count = r.u32("tensor count")? as usize;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} tensors, the configured model has {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        let dtype = r.take(1, "dtype")?[0];
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        if model.store.value(id).dim() != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` is {rows}×{cols}, expected {:?}",
                model.store.value(id).dim()
            )));
        }
        let values: Vec<f64> = match dtype {
            0 => r
                .take(rows * cols * 4, &name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            1 => r
                .take(rows * cols * 8, &name)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            other => return Err(Error::Checkpoint(format!("unknown dtype {other} for `{name}`"))),
        };
        model.store.set(id, Mat::from_shape_vec((rows, cols), values).unwrap());
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, GeneratorConfig};

    fn model(precision: Precision) -> Model {
        Model::new(
            ModelConfig {
                d: 8,
                precision,
                ..Default::default()
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ds = generate_synthetic_dataset(&GeneratorConfig::default()).unwrap();
        for p in [Precision::F32, Precision::F64] {
            let m = model(p);
            let back = decode_checkpoint(&encode_checkpoint(&m)).unwrap();
            assert_eq!(back.store, m.store);
            assert_eq!(back.config, m.config);
            for u in ds.utterances.iter().take(5) {
                let a = m.predict_probs(u).unwrap();
                let b = back.predict_probs(u).unwrap();
                assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let bytes = encode_checkpoint(&model(Precision::F32));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode_checkpoint(&extra), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&model(Precision::F32));
        assert_eq!(&bytes[..8], b"MMFUSECK");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    }
}
