//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "MGRUCKPT"
//! version  u32
//! hlen     u64      length of the JSON header
//! header   hlen bytes: {"config": ModelConfig, "tensors": [{"name", "shape", "offset"}]}
//! payload  f64 values, row-major, tensor after tensor; `offset` counts values
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so save → load → save is byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::BnMode;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MGRUCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Model {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        let mut offset = 0;
        for (name, t) in self.named_tensors() {
            entries.push(Entry {
                name,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            tensors: entries,
        })
        .map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// The restored model has its batch norms in eval mode.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &body[hlen..];
        if !payload.len().is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let mut model = Model::new(header.config, 0)?;
        let expected = model.named_tensors().len();
        if expected != header.tensors.len() {
            return Err(bad(format!(
                "config implies {expected} tensors, file has {}",
                header.tensors.len()
            )));
        }
        let mut entries = header.tensors.iter();
        let mut used = 0;
        model.for_each_tensor_mut(|name, slot| {
            let entry = entries.next().ok_or_else(|| bad("missing tensors"))?;
            if name != entry.name {
                return Err(bad(format!("expected tensor `{name}`, found `{}`", entry.name)));
            }
            if slot.shape() != entry.shape.as_slice() {
                return Err(bad(format!(
                    "tensor `{name}` has shape {:?}, config implies {:?}",
                    entry.shape,
                    slot.shape()
                )));
            }
            let end = entry.offset + slot.len();
            if entry.offset != used || end > values.len() {
                return Err(bad(format!("tensor `{name}` payload out of bounds")));
            }
            slot.data_mut().copy_from_slice(&values[entry.offset..end]);
            used = end;
            Ok(())
        })?;
        if used != values.len() {
            return Err(bad(format!("{} trailing values", values.len() - used)));
        }
        model.set_bn_mode(BnMode::Eval);
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        Model::from_checkpoint_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_config;
    use super::super::CellKind;
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn round_trip_is_byte_identical() {
        for kind in CellKind::ALL {
            let mut model = Model::new(tiny_config(kind), 11).unwrap();
            // move running statistics away from their defaults
            let x = Tensor::full(&[3, 4, 3], 0.25);
            model.forward(&x.map(|v| v * 3.0)).unwrap();
            let bytes = model.to_checkpoint_bytes().unwrap();
            let loaded = Model::from_checkpoint_bytes(&bytes).unwrap();
            model.set_bn_mode(BnMode::Eval);
            assert_eq!(loaded, model);
            assert_eq!(loaded.to_checkpoint_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let model = Model::new(tiny_config(CellKind::Mgruip), 1).unwrap();
        let bytes = model.to_checkpoint_bytes().unwrap();
        assert!(Model::from_checkpoint_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Model::from_checkpoint_bytes(&bad_magic).is_err());
        let mut extra = bytes;
        extra.extend_from_slice(&0f64.to_le_bytes());
        assert!(Model::from_checkpoint_bytes(&extra).is_err());
    }
}
