//! Binary checkpoints: a version line, JSON metadata, then every parameter as
//! name, shape and raw little-endian `f64` values.

use serde::{Deserialize, Serialize};

use crate::data::Catalog;
use crate::error::{Error, Result};
use crate::model::DualModel;
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8] = b"DDGHM-CKPT-1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub seed: u64,
    pub catalog: Catalog,
    pub best_epoch: usize,
}

pub fn encode(meta: &CheckpointMeta, store: &ParameterStore) -> Result<Vec<u8>> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    let json = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &s in shape {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows".into()))
    }
}

/// Metadata and named parameter values, in file order.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointMeta, Vec<(String, Tensor)>)> {
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(Error::Checkpoint("missing or unsupported version header (expected DDGHM-CKPT-1)".into()));
    }
    let mut r = Reader {
        bytes,
        at: CHECKPOINT_MAGIC.len(),
    };
    let meta_len = r.len()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let count = r.len()?;
    let mut params = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflows".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        params.push((name, value));
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after the last parameter".into()));
    }
    Ok((meta, params))
}

/// Rebuilds the model described by the metadata and loads every value into it.
pub fn restore(bytes: &[u8]) -> Result<(CheckpointMeta, ParameterStore, DualModel)> {
    let (meta, params) = decode(bytes)?;
    let (mut store, model) = meta.config.build_model(&meta.catalog)?;
    if params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, the configured model has {}",
            params.len(),
            store.len()
        )));
    }
    for (name, value) in params {
        let id = store
            .id(&name)
            .map_err(|_| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        store
            .set_value(id, value)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    }
    Ok((meta, store, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (CheckpointMeta, ParameterStore) {
        let config = TrainConfig { dim: 3, ..Default::default() };
        let catalog = Catalog::synthetic(4, 5);
        let (store, _) = config.build_model(&catalog).unwrap();
        let meta = CheckpointMeta {
            seed: config.seed,
            config,
            catalog,
            best_epoch: 2,
        };
        (meta, store)
    }

    #[test]
    fn round_trip_is_exact() {
        let (meta, store) = sample();
        let bytes = encode(&meta, &store).unwrap();
        let (meta2, store2, _) = restore(&bytes).unwrap();
        assert_eq!(meta, meta2);
        for ((_, a), (_, b)) in store.iter().zip(store2.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(encode(&meta2, &store2).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let (meta, store) = sample();
        let bytes = encode(&meta, &store).unwrap();
        let mut bad = bytes.clone();
        bad[6] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode(&longer).is_err());
    }
}
