use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoded tokens with the encoder frame (1-based) at which each was emitted.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub frames: Vec<usize>,
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Frame-synchronous greedy search.
///
/// `score(frame, prefix)` returns the `V + 1` output scores at encoder frame
/// `frame` (1-based) given the tokens emitted so far. At each frame the search
/// keeps emitting the best non-blank token until blank wins or
/// `max_symbols` tokens were emitted at that frame.
pub fn greedy_search<F>(frames: usize, max_symbols: usize, mut score: F) -> Result<Hypothesis>
where
    F: FnMut(usize, &[usize]) -> Result<Vec<f64>>,
{
    if max_symbols == 0 {
        return Err(Error::arg("greedy_search", "max_symbols must be at least 1"));
    }
    let mut hyp = Hypothesis::default();
    for t in 1..=frames {
        for _ in 0..max_symbols {
            let k = argmax(&score(t, &hyp.tokens)?);
            if k == 0 {
                break;
            }
            hyp.tokens.push(k);
            hyp.frames.push(t);
        }
    }
    Ok(hyp)
}

/// Emission times of one decoded utterance, convertible to source frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionRecord {
    pub id: String,
    pub tokens: Vec<usize>,
    /// Encoder frames, 1-based.
    pub frames: Vec<usize>,
    pub frame_duration_ms: f64,
    pub stride: usize,
    /// Extra source frames of look-ahead the decoder was allowed to see.
    pub lookahead_frames: usize,
}

impl EmissionRecord {
    pub fn new(id: impl Into<String>, hyp: Hypothesis, stride: usize, lookahead_frames: usize) -> Self {
        Self {
            id: id.into(),
            tokens: hyp.tokens,
            frames: hyp.frames,
            frame_duration_ms: crate::data::FRAME_MS,
            stride,
            lookahead_frames,
        }
    }

    /// Last source frame (1-based) consumed when each token was emitted.
    pub fn source_frames(&self) -> Vec<usize> {
        self.frames
            .iter()
            .map(|&f| f * self.stride + self.lookahead_frames)
            .collect()
    }

    pub fn last_source_frame(&self) -> Option<usize> {
        self.source_frames().last().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_on_tie() {
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
        assert_eq!(argmax(&[f64::NEG_INFINITY, -3.0]), 1);
    }

    #[test]
    fn scripted_scores() {
        // frame 1: emit 2 then blank; frame 2: blank; frame 3: emit 1, 1 then blank
        let script = |t: usize, prefix: &[usize]| -> Result<Vec<f64>> {
            let k = match (t, prefix.len()) {
                (1, 0) => 2,
                (3, 1) | (3, 2) => 1,
                _ => 0,
            };
            let mut s = vec![0.0; 3];
            s[k] = 1.0;
            Ok(s)
        };
        let hyp = greedy_search(3, 4, script).unwrap();
        assert_eq!(hyp.tokens, vec![2, 1, 1]);
        assert_eq!(hyp.frames, vec![1, 3, 3]);
    }

    #[test]
    fn symbol_cap_per_frame() {
        let always_one = |_: usize, _: &[usize]| Ok(vec![0.0, 1.0]);
        let hyp = greedy_search(2, 3, always_one).unwrap();
        assert_eq!(hyp.frames, vec![1, 1, 1, 2, 2, 2]);
        assert!(greedy_search(2, 0, always_one).is_err());
    }

    #[test]
    fn source_frame_conversion() {
        let hyp = Hypothesis {
            tokens: vec![3, 4],
            frames: vec![2, 5],
        };
        let rec = EmissionRecord::new("u", hyp, 2, 3);
        assert_eq!(rec.source_frames(), vec![7, 13]);
        assert_eq!(rec.last_source_frame(), Some(13));
    }
}
