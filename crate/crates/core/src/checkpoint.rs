//! Named-tensor archive.
//!
//! Layout (little-endian): magic `PALCKPT1`, `u32` version, `u32` metadata
//! length followed by that many bytes of JSON, then one record per tensor
//! until end of file: `u32` name length, name bytes, `u32` rank, `u32`
//! extents, and the values as `f32`. Tensors are written in name order, so
//! saving a loaded checkpoint reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PalError, Result};
use crate::nn::TensorMap;
use crate::transformer::BlockConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PALCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `lm`, `asr_encoder` or `encoder`.
    pub kind: String,
    /// Shape of the transformer stack the archive carries, if any.
    pub block_config: Option<BlockConfig>,
    /// Top-level components present, e.g. `embed`, `stack`, `head`.
    pub components: Vec<String>,
    pub vocab: Option<usize>,
    /// Free-form extras: loss curves, frontend variant, freeze policy,
    /// corpus fingerprints.
    #[serde(default)]
    pub info: BTreeMap<String, serde_json::Value>,
}

impl CheckpointMeta {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            block_config: None,
            components: Vec::new(),
            vocab: None,
            info: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: CheckpointMeta,
    pub tensors: TensorMap,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn corrupt(what: &str) -> PalError {
    PalError::Checkpoint(format!("corrupt archive: {what}"))
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, tensors: TensorMap) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            meta,
            tensors,
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        for (name, (shape, vals)) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &e in shape {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(vals.len() * 4);
            for v in vals {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(PalError::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = read_u32(&mut r)? as usize;
        if meta_len > r.len() {
            return Err(corrupt("metadata length"));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&r[..meta_len])?;
        r = &r[meta_len..];
        let mut tensors = BTreeMap::new();
        while !r.is_empty() {
            let name_len = read_u32(&mut r).map_err(|_| corrupt("record header"))? as usize;
            if name_len > r.len() {
                return Err(corrupt("name length"));
            }
            let name = String::from_utf8(r[..name_len].to_vec()).map_err(|_| corrupt("name encoding"))?;
            r = &r[name_len..];
            let rank = read_u32(&mut r).map_err(|_| corrupt("rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r).map_err(|_| corrupt("extent"))? as usize);
            }
            let n: usize = shape.iter().product();
            if n * 4 > r.len() {
                return Err(corrupt(&format!("values of {name}")));
            }
            let vals = r[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            r = &r[n * 4..];
            if tensors.insert(name.clone(), (shape, vals)).is_some() {
                return Err(corrupt(&format!("duplicate tensor {name}")));
            }
        }
        Ok(Self { version, meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Human-readable listing: one `name shape` line per tensor.
    pub fn describe(&self) -> String {
        let mut s = format!(
            "kind: {}\nversion: {}\ncomponents: {}\n",
            self.meta.kind,
            self.version,
            self.meta.components.join(", ")
        );
        for (name, (shape, _)) in &self.tensors {
            s.push_str(&format!("{name} {shape:?}\n"));
        }
        s
    }

    /// Total number of stored values.
    pub fn value_count(&self) -> usize {
        self.tensors.values().map(|(_, v)| v.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut meta = CheckpointMeta::new("lm");
        meta.block_config = Some(BlockConfig::small());
        meta.components = vec!["embed".into(), "stack".into()];
        meta.info.insert("loss_curve".into(), serde_json::json!([3.1, 2.7, 0.1 + 0.2]));
        let mut t = TensorMap::new();
        t.insert("b".into(), (vec![2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 7.0]));
        t.insert("a".into(), (vec![3], vec![0.1, 0.2, 0.3]));
        t.insert("scalar".into(), (vec![], vec![4.0]));
        Checkpoint::new(meta, t)
    }

    #[test]
    fn bytes_round_trip_identically() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..8], b"PALCKPT1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT"), Err(PalError::Checkpoint(_))));
        let mut bytes = sample().to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_values_survive(vals in proptest::collection::vec(any::<f32>(), 0..40), name in "[a-z.0-9]{1,20}") {
            let mut t = TensorMap::new();
            t.insert(name, (vec![vals.len()], vals));
            let c = Checkpoint::new(CheckpointMeta::new("encoder"), t);
            let bytes = c.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
