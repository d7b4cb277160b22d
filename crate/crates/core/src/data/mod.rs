//! Utterances, the synthetic task, the on-disk dataset format, and batching.

mod format;
mod synth;

pub use format::{
    decode_features, encode_features, generate_dataset, load_manifest, manifest_path, read_features, write_dataset,
    write_features, ManifestEntry, FEATURE_MAGIC, MANIFEST_NAME,
};
pub use synth::{generate_utterances, render, SynthTaskConfig};

use crate::error::{Error, Result};
use crate::tensor::{SeqLayout, Tensor};

/// Frame duration of every feature frame.
pub const FRAME_MS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T, D]`.
    pub features: Tensor,
    /// Token ids in `1..=V`.
    pub transcript: Vec<usize>,
    /// Last content frame (1-based).
    pub end_of_speech_frame: usize,
}

impl Utterance {
    /// Without an explicit `end_of_speech_frame` the last frame is used.
    pub fn new(id: String, features: Tensor, transcript: Vec<usize>, end_of_speech_frame: Option<usize>) -> Result<Self> {
        if features.rank() != 2 || features.rows() == 0 {
            return Err(Error::Utterance {
                id,
                reason: format!("features must be [T >= 1, D], got {:?}", features.shape()),
            });
        }
        let eos = end_of_speech_frame.unwrap_or(features.rows());
        if eos == 0 || eos > features.rows() {
            return Err(Error::Utterance {
                id,
                reason: format!("end_of_speech_frame {eos} outside 1..={}", features.rows()),
            });
        }
        Ok(Self {
            id,
            features,
            transcript,
            end_of_speech_frame: eos,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }

    /// Copy with `n` zero frames appended (look-ahead padding).
    pub fn with_trailing_zeros(&self, n: usize) -> Utterance {
        let d = self.features.cols();
        let mut data = self.features.data().to_vec();
        data.resize(data.len() + n * d, 0.0);
        Utterance {
            features: Tensor::matrix(self.num_frames() + n, d, data).expect("shape"),
            ..self.clone()
        }
    }
}

/// Zero-padded batch with validity masks.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub ids: Vec<String>,
    /// `[B, T_max, D]`.
    pub features: Tensor,
    pub frame_mask: Vec<Vec<bool>>,
    /// `B` rows of `U_max` ids, padded with 0.
    pub targets: Vec<Vec<usize>>,
    pub token_mask: Vec<Vec<bool>>,
}

impl PaddedBatch {
    pub fn new(utts: &[&Utterance]) -> Result<Self> {
        let d = utts.first().map_or(0, |u| u.features.cols());
        if let Some(u) = utts.iter().find(|u| u.features.cols() != d) {
            return Err(Error::Utterance {
                id: u.id.clone(),
                reason: format!("feature dim {} differs from {d}", u.features.cols()),
            });
        }
        let t_max = utts.iter().map(|u| u.num_frames()).max().unwrap_or(0);
        let u_max = utts.iter().map(|u| u.transcript.len()).max().unwrap_or(0);
        let mut data = vec![0.0; utts.len() * t_max * d];
        let mut frame_mask = Vec::with_capacity(utts.len());
        let mut targets = Vec::with_capacity(utts.len());
        let mut token_mask = Vec::with_capacity(utts.len());
        for (b, u) in utts.iter().enumerate() {
            data[b * t_max * d..][..u.features.numel()].copy_from_slice(u.features.data());
            frame_mask.push((0..t_max).map(|t| t < u.num_frames()).collect());
            let mut y = u.transcript.clone();
            y.resize(u_max, 0);
            targets.push(y);
            token_mask.push((0..u_max).map(|i| i < u.transcript.len()).collect());
        }
        Ok(Self {
            ids: utts.iter().map(|u| u.id.clone()).collect(),
            features: Tensor::new(vec![utts.len(), t_max, d], data)?,
            frame_mask,
            targets,
            token_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Drops the padding: valid frames of every utterance stacked along time.
    pub fn pack(&self) -> PackedBatch {
        let shape = self.features.shape();
        let (t_max, d) = (shape[1], shape[2]);
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(self.len());
        for (b, mask) in self.frame_mask.iter().enumerate() {
            let n = mask.iter().filter(|&&m| m).count();
            data.extend_from_slice(&self.features.data()[b * t_max * d..][..n * d]);
            lens.push(n);
        }
        let targets = self
            .targets
            .iter()
            .zip(&self.token_mask)
            .map(|(y, m)| y.iter().zip(m).filter(|(_, &m)| m).map(|(&t, _)| t).collect())
            .collect();
        let total = lens.iter().sum();
        PackedBatch {
            ids: self.ids.clone(),
            features: Tensor::matrix(total, d, data).expect("shape"),
            layout: SeqLayout::from_lens(lens),
            targets,
        }
    }
}

/// Variable-length utterances stacked along time, described by a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch {
    pub ids: Vec<String>,
    /// `[Σ T_i, D]`.
    pub features: Tensor,
    pub layout: SeqLayout,
    pub targets: Vec<Vec<usize>>,
}

impl PackedBatch {
    pub fn from_utterances(utts: &[&Utterance]) -> Result<Self> {
        Ok(PaddedBatch::new(utts)?.pack())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Consecutive padded batches of at most `batch_size` utterances.
pub fn batch(utts: &[Utterance], batch_size: usize) -> Result<Vec<PaddedBatch>> {
    if batch_size == 0 {
        return Err(Error::arg("batch", "batch_size must be at least 1"));
    }
    utts.chunks(batch_size)
        .map(|c| PaddedBatch::new(&c.iter().collect::<Vec<_>>()))
        .collect()
}
