use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Synthetic streaming-recognition task: every token is rendered as a run of
/// `segment_frames` frames of its own one-hot channel plus Gaussian noise,
/// followed by trailing silence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskConfig {
    pub vocab_size: usize,
    pub segment_frames: usize,
    pub noise: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub trailing_silence: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SynthTaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 5,
            segment_frames: 4,
            noise: 0.2,
            min_tokens: 2,
            max_tokens: 5,
            trailing_silence: 6,
            feature_dim: 8,
            seed: 7,
        }
    }
}

impl SynthTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "must be at least 2"));
        }
        if self.segment_frames < 2 {
            return Err(Error::config("segment_frames", "must be at least 2"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise", "must be finite and non-negative"));
        }
        if self.min_tokens > self.max_tokens {
            return Err(Error::config("min_tokens", "exceeds max_tokens"));
        }
        if self.min_tokens == 0 && self.trailing_silence == 0 {
            return Err(Error::config("trailing_silence", "must be at least 1 when min_tokens is 0"));
        }
        if self.feature_dim < self.vocab_size {
            return Err(Error::config(
                "feature_dim",
                format!(
                    "{} channels cannot hold {} orthogonal token patterns",
                    self.feature_dim, self.vocab_size
                ),
            ));
        }
        Ok(())
    }

    /// Channel flagging the first frame of every token when a spare channel exists.
    pub fn onset_channel(&self) -> Option<usize> {
        (self.feature_dim > self.vocab_size).then(|| self.feature_dim - 1)
    }
}

/// Renders one utterance for the given tokens. Values are rounded to `f32`
/// so in-memory and on-disk copies are identical.
pub fn render(cfg: &SynthTaskConfig, id: String, tokens: Vec<usize>, rng: &mut impl Rng) -> Result<Utterance> {
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::config("noise", e.to_string()))?;
    let (d, dim) = (cfg.segment_frames, cfg.feature_dim);
    let frames = tokens.len() * d + cfg.trailing_silence;
    let mut data = vec![0.0; frames * dim];
    for (i, &tok) in tokens.iter().enumerate() {
        for f in 0..d {
            data[(i * d + f) * dim + tok - 1] = 1.0;
        }
        if let Some(c) = cfg.onset_channel() {
            data[i * d * dim + c] = 1.0;
        }
    }
    for v in &mut data {
        *v = (*v + noise.sample(rng)) as f32 as f64;
    }
    let features = Tensor::matrix(frames, dim, data)?;
    let eos = (tokens.len() * d).max(1);
    Utterance::new(id, features, tokens, Some(eos))
}

/// Deterministic in-memory utterances `utt00000 ..`.
pub fn generate_utterances(cfg: &SynthTaskConfig, n: usize) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..n)
        .map(|i| {
            let u = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
            let tokens = (0..u).map(|_| rng.gen_range(1..=cfg.vocab_size)).collect();
            render(cfg, format!("utt{i:05}"), tokens, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> SynthTaskConfig {
        SynthTaskConfig {
            vocab_size: 4,
            segment_frames: 4,
            noise: 0.0,
            feature_dim: 4,
            ..SynthTaskConfig::default()
        }
    }

    #[test]
    fn noiseless_argmax_identifies_token() {
        let utts = generate_utterances(&noiseless(), 5).unwrap();
        for u in &utts {
            for (i, &tok) in u.transcript.iter().enumerate() {
                for f in 0..4 {
                    let row = u.features.row(i * 4 + f);
                    let best = (0..4).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                    assert_eq!(best, tok - 1);
                }
            }
            assert_eq!(u.end_of_speech_frame, u.transcript.len() * 4);
            assert_eq!(u.num_frames(), u.transcript.len() * 4 + 6);
        }
    }

    #[test]
    fn onset_cue_marks_segment_starts() {
        let cfg = SynthTaskConfig {
            noise: 0.0,
            ..SynthTaskConfig::default()
        };
        let u = &generate_utterances(&cfg, 1).unwrap()[0];
        for t in 0..u.num_frames() {
            let cue = u.features.at2(t, 7);
            let expected = t % 4 == 0 && t < u.end_of_speech_frame;
            assert_eq!(cue, if expected { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let cfg = SynthTaskConfig::default();
        let a = generate_utterances(&cfg, 20).unwrap();
        assert_eq!(a, generate_utterances(&cfg, 20).unwrap());
        assert!(a.iter().all(|u| (2..=5).contains(&u.transcript.len())));
        assert!(a.iter().flat_map(|u| &u.transcript).all(|&t| (1..=5).contains(&t)));
        let other = SynthTaskConfig { seed: 8, ..cfg };
        assert_ne!(a, generate_utterances(&other, 20).unwrap());
    }

    #[test]
    fn capacity_violation() {
        let cfg = SynthTaskConfig {
            vocab_size: 9,
            ..SynthTaskConfig::default()
        };
        let err = generate_utterances(&cfg, 1).unwrap_err();
        assert!(err.to_string().contains("feature_dim"), "{err}");
    }

    #[test]
    fn zero_tokens_allowed() {
        let cfg = SynthTaskConfig {
            min_tokens: 0,
            max_tokens: 0,
            ..SynthTaskConfig::default()
        };
        let u = &generate_utterances(&cfg, 1).unwrap()[0];
        assert!(u.transcript.is_empty());
        assert_eq!(u.end_of_speech_frame, 1);
    }
}
