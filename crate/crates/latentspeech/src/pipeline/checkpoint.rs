//! LSPK checkpoint format: magic, version, JSON header (config snapshot,
//! noise schedule, tensor index), then concatenated little-endian f32 data.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{LsError, Result};
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LSPK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorIndexEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<NoiseSchedule>,
    pub tensors: BTreeMap<String, TensorIndexEntry>,
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    config: serde_json::Value,
    schedule: Option<NoiseSchedule>,
) -> Result<()> {
    let mut tensors = BTreeMap::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in store.iter() {
        let offset = payload.len() as u64;
        for &v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.insert(
            name.clone(),
            TensorIndexEntry {
                dtype: "f32".into(),
                shape: t.shape.clone(),
                offset,
                byte_len: (t.data.len() * 4) as u64,
            },
        );
    }
    let header = CheckpointHeader {
        config,
        schedule,
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    f.write_all(&payload)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointHeader)> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| LsError::Format("file too short for LSPK magic".into()))?;
    if &magic != MAGIC {
        return Err(LsError::Format(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(LsError::Format(format!(
            "checkpoint version {version} unsupported (expected {VERSION})"
        )));
    }
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8)?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)
        .map_err(|_| LsError::Format("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    // validate the index before touching the payload
    let total = payload.len() as u64;
    let mut spans: Vec<(u64, u64)> = header
        .tensors
        .values()
        .map(|e| (e.offset, e.offset + e.byte_len))
        .collect();
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[0].1 > w[1].0 {
            return Err(LsError::Format("overlapping tensor spans".into()));
        }
    }
    let mut store = ParamStore::new();
    for (name, entry) in &header.tensors {
        if entry.dtype != "f32" {
            return Err(LsError::Format(format!(
                "tensor {name}: unsupported dtype {}",
                entry.dtype
            )));
        }
        let end = entry.offset + entry.byte_len;
        if end > total || entry.byte_len % 4 != 0 {
            return Err(LsError::Format(format!(
                "tensor {name}: span {}..{end} outside payload of {total} bytes",
                entry.offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if numel * 4 != entry.byte_len as usize {
            return Err(LsError::Format(format!(
                "tensor {name}: shape {:?} disagrees with byte length {}",
                entry.shape, entry.byte_len
            )));
        }
        let data = payload[entry.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(name, Tensor::new(entry.shape.clone(), data)?);
    }
    Ok((store, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("ae.w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, 3.25, f32::MIN_POSITIVE, 9.9]).unwrap());
        s.insert("diff.b", Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        s
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lspk");
        let store = sample_store();
        let sched = crate::diffusion::make_schedule(10, 1e-4, 0.05).unwrap();
        save_checkpoint(&path, &store, serde_json::json!({"k": 1}), Some(sched.clone())).unwrap();
        let (loaded, header) = load_checkpoint(&path).unwrap();
        for (name, t) in store.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(l.shape, t.shape);
            for (a, b) in l.data.iter().zip(&t.data) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
        assert_eq!(header.schedule.unwrap(), sched);
        assert_eq!(header.tensors.len(), 2);
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lspk");
        save_checkpoint(&path, &sample_store(), serde_json::json!({}), None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 6]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(LsError::Format(_))));
    }

    #[test]
    fn bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lspk");
        save_checkpoint(&path, &sample_store(), serde_json::json!({}), None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // version
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
