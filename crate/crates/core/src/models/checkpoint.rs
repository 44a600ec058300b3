//! Binary checkpoint format.
//!
//! ```text
//! "DKDC"                      4 bytes
//! version                     u32 LE
//! descriptor length           u32 LE, then UTF-8 JSON (architecture + metadata)
//! repeated until end of file:
//!   name length               u32 LE, then UTF-8 name
//!   rank                      u32 LE
//!   dims                      rank x u32 LE
//!   payload                   prod(dims) x f32 LE
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DKDC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    architecture: Architecture,
    meta: CheckpointMeta,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelGraph<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let desc = serde_json::to_string(&Descriptor {
            architecture: self.model.architecture().clone(),
            meta: self.meta.clone(),
        })
        .map_err(|e| Error::format(0, format!("descriptor encoding: {e}")))?;
        let mut out = Vec::with_capacity(4 * self.model.param_count() + desc.len() + 64);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &desc);
        for p in self.model.params() {
            put_str(&mut out, &p.name);
            out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected \"DKDC\"")));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let desc_at = r.pos as u64;
        let desc = r.string("descriptor")?;
        let desc: Descriptor =
            serde_json::from_str(&desc).map_err(|e| Error::format(desc_at, format!("descriptor: {e}")))?;
        let mut model = ModelGraph::<f32>::build(desc.architecture, 0)
            .map_err(|e| Error::format(desc_at, format!("architecture rejected: {e}")))?;

        let mut arrays: BTreeMap<String, (u64, Tensor<f32>)> = BTreeMap::new();
        while r.pos < bytes.len() {
            let at = r.pos as u64;
            let name = r.string("array name")?;
            let rank = r.u32("rank")? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::format(at, format!("array {name}: implausible rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dimension")? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(at, format!("array {name}: size overflow")))?;
            let raw = r.take(count.saturating_mul(4), "payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::format(at, format!("array {name}: {e}")))?;
            if arrays.insert(name.clone(), (at, t)).is_some() {
                return Err(Error::format(at, format!("duplicate array {name}")));
            }
        }

        let end = bytes.len() as u64;
        for p in model.params_mut() {
            let (at, t) = arrays
                .remove(&p.name)
                .ok_or_else(|| Error::format(end, format!("missing array {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::format(
                    at,
                    format!("array {}: shape {:?}, architecture expects {:?}", p.name, t.shape(), p.value.shape()),
                ));
            }
            p.value = t;
        }
        if let Some((name, (at, _))) = arrays.into_iter().next() {
            return Err(Error::format(at, format!("unexpected array {name}")));
        }
        Ok(Self { model, meta: desc.meta })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.pos as u64,
                format!("truncated file: {what} needs {n} bytes, {} remain", self.bytes.len() - self.pos),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos as u64;
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(at, format!("{what} is not UTF-8")))
    }
}

/// Write `model` (as 32-bit floats) with its metadata to `path`.
pub fn save_checkpoint(model: &ModelGraph<f32>, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let ck = Checkpoint {
        model: model.clone(),
        meta: meta.clone(),
    };
    fs::write(path, ck.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_dcsnet;

    fn sample() -> Checkpoint {
        let mut meta = CheckpointMeta {
            epoch: 3,
            seed: 11,
            ..Default::default()
        };
        meta.metrics.insert("val_acc".into(), 0.75);
        Checkpoint {
            model: build_dcsnet([3, 16, 16], 3, 9).unwrap(),
            meta,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"DKDC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, ck.meta);
        for (a, b) in ck.model.params().iter().zip(back.model.params()) {
            assert_eq!(a.name, b.name);
            let ab: Vec<u32> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn wrong_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [2usize, 7, 20, bytes.len() - 1, bytes.len() - 4000] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: expected format error, got {:?}", other.map(|_| ())),
            }
        }
    }
}
