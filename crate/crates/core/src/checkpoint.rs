//! Binary checkpoint: magic, little-endian header length, JSON header with the
//! model config and parameter table, raw little-endian `f64` values in table
//! order, and a CRC-32 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_file, write_file};
use crate::param::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ACTGCKP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    /// `"cnn"` or `"gcn"`.
    pub kind: String,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(kind: &str, config: serde_json::Value, store: &ParamStore) -> Self {
        let values: Vec<(String, Tensor)> = store.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        let params = values
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                kind: kind.to_string(),
                config,
                params,
            },
            values,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header is serializable");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.values.iter().map(|v| v.1.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.values {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], source_name: &str) -> Result<Self> {
        let err = |loc: String, msg: String| Error::parse(source_name, loc, msg);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err("byte 0".into(), "not an actgraph checkpoint".into()));
        }
        let (bytes, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        if crc32fast::hash(bytes) != stored {
            return Err(err(format!("byte {}", bytes.len()), "checksum mismatch".into()));
        }
        let hlen = usize::try_from(u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")))
            .map_err(|_| err("byte 8".into(), "header length overflows".into()))?;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| err("byte 8".into(), format!("header length {hlen} exceeds file")))?;
        let header: CheckpointHeader = serde_json::from_slice(body)
            .map_err(|e| err(format!("header line {} column {}", e.line(), e.column()), e.to_string()))?;
        let mut pos = 16 + hlen;
        let mut values = Vec::with_capacity(header.params.len());
        for p in &header.params {
            let end = p
                .shape
                .iter()
                .try_fold(8usize, |acc, &d| acc.checked_mul(d))
                .and_then(|len| pos.checked_add(len));
            let raw = end.and_then(|end| bytes.get(pos..end)).ok_or_else(|| {
                err(format!("byte {pos}"), format!("truncated data for parameter {}", p.name))
            })?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(err(format!("byte {pos}"), format!("non-finite value in {}", p.name)));
            }
            values.push((p.name.clone(), Tensor::new(p.shape.clone(), data)?));
            pos += raw.len();
        }
        if pos != bytes.len() {
            return Err(err(format!("byte {pos}"), format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint { header, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&read_file(path)?, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::new(vec![2], vec![0.1, -3.5e-300]).unwrap()).unwrap();
        store.add("b.weight", Tensor::new(vec![1, 3], vec![1.0 / 3.0, 2.0, 7.0]).unwrap()).unwrap();
        let ck = Checkpoint::from_store("gcn", serde_json::json!({"depth": 3}), &store);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "t").unwrap();
        assert_eq!(back, ck);
        for cut in [0, 10, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut], "t"), Err(Error::Parse { .. })));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, "t").is_err());
        let mut flipped = bytes.clone();
        let last_value = bytes.len() - 5;
        flipped[last_value] ^= 1;
        let e = Checkpoint::from_bytes(&flipped, "t").unwrap_err();
        assert!(e.to_string().contains("checksum"), "{e}");
    }
}
