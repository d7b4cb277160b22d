//! Single-file checkpoints: `DMCK`, a little-endian `u32` header length, a
//! JSON header, then every tensor as little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::model::DualModeModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::init_seed;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub step: usize,
    pub config: ExperimentConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(store: &ParamStore, config: &ExperimentConfig, step: usize) -> Result<Vec<u8>> {
    let mut offset = 0;
    let tensors = store
        .entries()
        .iter()
        .map(|e| {
            let entry = TensorEntry {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                offset,
                trainable: e.trainable,
            };
            offset += 8 * e.value.numel();
            entry
        })
        .collect();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        step,
        config: config.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(8 + json.len() + offset);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for e in store.entries() {
        for v in e.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Writes via a temporary file in the same directory and a rename.
pub fn save_checkpoint(path: &Path, store: &ParamStore, config: &ExperimentConfig, step: usize) -> Result<()> {
    let bytes = encode_checkpoint(store, config, step)?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A checkpoint with its model rebuilt from the stored config.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: DualModeModel,
    pub store: ParamStore,
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fail = |reason: String| Error::Format {
        path: path.to_owned(),
        reason,
    };
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| fail(format!("truncated header ({hlen} bytes announced)")))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| fail(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(fail(format!("unsupported format_version {}", header.format_version)));
    }
    let payload = &bytes[8 + hlen..];

    let cfg = &header.config;
    let (mut store, model) = DualModeModel::init(&cfg.model, cfg.train.weight_sharing, init_seed(cfg.seed))
        .map_err(|e| fail(format!("rebuilding model: {e}")))?;
    if header.tensors.len() != store.len() {
        return Err(fail(format!(
            "{} tensors stored, the model has {}",
            header.tensors.len(),
            store.len()
        )));
    }
    let mut expected_end = 0;
    for t in &header.tensors {
        let id = store
            .id(&t.name)
            .ok_or_else(|| fail(format!("unknown tensor `{}`", t.name)))?;
        if store.get(id).shape() != t.shape.as_slice() {
            return Err(fail(format!(
                "tensor `{}` has shape {:?}, the model expects {:?}",
                t.name,
                t.shape,
                store.get(id).shape()
            )));
        }
        let n = t.shape.iter().product::<usize>();
        let raw = payload
            .get(t.offset..t.offset + 8 * n)
            .ok_or_else(|| fail(format!("payload too short for `{}`", t.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.set(id, Tensor::new(t.shape.clone(), data)?)?;
        expected_end = expected_end.max(t.offset + 8 * n);
    }
    if payload.len() != expected_end {
        return Err(fail(format!(
            "payload is {} bytes, expected {expected_end}",
            payload.len()
        )));
    }
    Ok(Checkpoint { header, model, store })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model.encoder = EncoderConfig {
            channels: 8,
            blocks: 1,
            ..EncoderConfig::default()
        };
        cfg
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let cfg = config();
        let (store, _) = DualModeModel::init(&cfg.model, cfg.train.weight_sharing, init_seed(cfg.seed)).unwrap();
        let bytes = encode_checkpoint(&store, &cfg, 7).unwrap();
        let ck = decode_checkpoint(&bytes, Path::new("x")).unwrap();
        assert_eq!(ck.store, store);
        assert_eq!(ck.header.step, 7);
        assert_eq!(encode_checkpoint(&ck.store, &ck.header.config, 7).unwrap(), bytes);
    }

    #[test]
    fn corrupted_checkpoints_rejected() {
        let cfg = config();
        let (store, _) = DualModeModel::init(&cfg.model, cfg.train.weight_sharing, 0).unwrap();
        let bytes = encode_checkpoint(&store, &cfg, 0).unwrap();
        let p = Path::new("ck.dmck");
        assert!(decode_checkpoint(&bytes[..bytes.len() - 8], p).is_err());
        assert!(decode_checkpoint(&[bytes.as_slice(), &[0u8; 8]].concat(), p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, p).unwrap_err().to_string().contains("ck.dmck"));

        let mut other = cfg.clone();
        other.model.encoder.channels = 12;
        let (store2, _) = DualModeModel::init(&other.model, other.train.weight_sharing, 0).unwrap();
        // header claims the 8-channel model, payload holds the 12-channel one
        let mixed = encode_checkpoint(&store2, &cfg, 0).unwrap();
        assert!(decode_checkpoint(&mixed, p).is_err());
    }

    #[test]
    fn atomic_save() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config();
        let (store, _) = DualModeModel::init(&cfg.model, cfg.train.weight_sharing, 0).unwrap();
        let p = dir.path().join("a.dmck");
        save_checkpoint(&p, &store, &cfg, 3).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap().store, store);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
