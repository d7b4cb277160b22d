//! DMF1 feature files and JSON-lines manifests.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{generate_utterances, SynthTaskConfig, Utterance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"DMF1";
pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Serializes `[T, D]` features: magic, `u32` T, `u32` D (little-endian),
/// then `T * D` row-major `f32` values.
pub fn encode_features(x: &Tensor) -> Result<Vec<u8>> {
    if x.rank() != 2 {
        return Err(Error::arg("write_features", format!("expected [T, D], got {:?}", x.shape())));
    }
    let mut buf = Vec::with_capacity(12 + 4 * x.numel());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(x.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(x.cols() as u32).to_le_bytes());
    for &v in x.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |reason: String| Error::Format {
        path: path.to_owned(),
        reason,
    };
    if bytes.len() < 12 {
        return Err(fail(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[..4])));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = 12 + 4 * t * d;
    if bytes.len() != expected {
        return Err(fail(format!(
            "expected {expected} bytes for {t} x {d} frames, found {}",
            bytes.len()
        )));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::matrix(t, d, data)
}

pub fn write_features(path: &Path, x: &Tensor) -> Result<()> {
    fs::write(path, encode_features(x)?).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub feature_file: String,
    pub num_frames: usize,
    pub feature_dim: usize,
    pub transcript: Vec<usize>,
    pub end_of_speech_frame: usize,
}

/// Writes `utts` as a dataset directory (`manifest.jsonl` plus
/// `features/<id>.dmf`). Returns the manifest path.
pub fn write_dataset(dir: &Path, utts: &[Utterance]) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut manifest = String::new();
    for u in utts {
        let rel = format!("features/{}.dmf", u.id);
        write_features(&dir.join(&rel), &u.features)?;
        let entry = ManifestEntry {
            id: u.id.clone(),
            feature_file: rel,
            num_frames: u.num_frames(),
            feature_dim: u.features.cols(),
            transcript: u.transcript.clone(),
            end_of_speech_frame: u.end_of_speech_frame,
        };
        manifest.push_str(&serde_json::to_string(&entry)?);
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST_NAME);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Generates `n` synthetic utterances into `dir`.
pub fn generate_dataset(cfg: &SynthTaskConfig, n: usize, dir: &Path) -> Result<Vec<Utterance>> {
    let utts = generate_utterances(cfg, n)?;
    write_dataset(dir, &utts)?;
    Ok(utts)
}

/// Accepts a manifest file or a dataset directory containing one.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_owned()
    }
}

/// Loads every utterance of a manifest in order, validating feature files
/// and token ids against `vocab_size`.
pub fn load_manifest(path: &Path, vocab_size: usize) -> Result<Vec<Utterance>> {
    let path = manifest_path(path);
    let base = path.parent().unwrap_or(Path::new("."));
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut utts = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.clone(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        let bad = |reason: String| Error::Utterance {
            id: entry.id.clone(),
            reason,
        };
        if let Some(&tok) = entry.transcript.iter().find(|&&t| t == 0 || t > vocab_size) {
            return Err(bad(format!("token {tok} outside 1..={vocab_size}")));
        }
        let features = read_features(&base.join(&entry.feature_file))?;
        if features.shape() != [entry.num_frames, entry.feature_dim] {
            return Err(bad(format!(
                "{} holds {:?} but the manifest says [{}, {}]",
                entry.feature_file,
                features.shape(),
                entry.num_frames,
                entry.feature_dim
            )));
        }
        if !features.is_finite() {
            return Err(bad(format!("{} contains non-finite values", entry.feature_file)));
        }
        utts.push(Utterance::new(
            entry.id.clone(),
            features,
            entry.transcript.clone(),
            Some(entry.end_of_speech_frame),
        )?);
    }
    Ok(utts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        let bytes = encode_features(&x).unwrap();
        assert_eq!(&bytes[..4], b"DMF1");
        assert_eq!(&bytes[4..12], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 12 + 24);
        assert_eq!(decode_features(&bytes, Path::new("x")).unwrap(), x);
    }

    #[test]
    fn corrupt_files_rejected() {
        let x = Tensor::zeros(vec![2, 2]);
        let mut bytes = encode_features(&x).unwrap();
        let p = Path::new("feat.dmf");
        assert!(decode_features(&bytes[..bytes.len() - 1], p).unwrap_err().to_string().contains("feat.dmf"));
        bytes[0] = b'X';
        assert!(decode_features(&bytes, p).unwrap_err().to_string().contains("magic"));
        assert!(decode_features(&bytes[..5], p).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthTaskConfig::default();
        let utts = generate_dataset(&cfg, 6, dir.path()).unwrap();
        let loaded = load_manifest(dir.path(), cfg.vocab_size).unwrap();
        assert_eq!(utts, loaded);
        let again = tempfile::tempdir().unwrap();
        generate_dataset(&cfg, 6, again.path()).unwrap();
        for u in &utts {
            let rel = format!("features/{}.dmf", u.id);
            assert_eq!(fs::read(dir.path().join(&rel)).unwrap(), fs::read(again.path().join(&rel)).unwrap());
        }
    }

    #[test]
    fn empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&SynthTaskConfig::default(), 0, dir.path()).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap(), "");
        assert!(load_manifest(dir.path(), 5).unwrap().is_empty());
    }

    #[test]
    fn manifest_errors_name_the_utterance() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&SynthTaskConfig::default(), 2, dir.path()).unwrap();
        let err = load_manifest(dir.path(), 2).unwrap_err().to_string();
        assert!(err.contains("utt0000"), "{err}");

        let feat = dir.path().join("features/utt00001.dmf");
        let bytes = fs::read(&feat).unwrap();
        fs::write(&feat, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_manifest(dir.path(), 5).unwrap_err().to_string();
        assert!(err.contains("utt00001.dmf"), "{err}");
    }
}
