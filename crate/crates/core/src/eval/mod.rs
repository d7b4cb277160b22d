//! Token error rate, emission latency, evaluation reports and emission-lattice export.

mod lattice;

pub use lattice::{export_lattice, lattice_csv, lattice_svg};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::DualModeModel;
use crate::params::ParamStore;
use crate::transducer::EmissionRecord;

/// Minimal edit operations between one hypothesis and its reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Unit-cost Levenshtein alignment. Among minimal alignments the
/// breakdown prefers substitutions, then deletions.
pub fn edit_counts(hyp: &[usize], reference: &[usize]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    // (cost, substitutions, deletions, insertions) per cell, one row at a time
    let mut prev: Vec<(usize, usize, usize, usize)> = (0..=m).map(|j| (j, 0, 0, j)).collect();
    for i in 1..=n {
        let mut cur = vec![(i, 0, i, 0); m + 1];
        for j in 1..=m {
            let (c, s, d, ins) = prev[j - 1];
            let diag = if reference[i - 1] == hyp[j - 1] {
                (c, s, d, ins)
            } else {
                (c + 1, s + 1, d, ins)
            };
            let (c, s, d, ins) = prev[j];
            let del = (c + 1, s, d + 1, ins);
            let (c, s, d, ins) = cur[j - 1];
            let insert = (c + 1, s, d, ins + 1);
            cur[j] = [diag, del, insert].into_iter().min_by_key(|x| x.0).expect("three candidates");
        }
        prev = cur;
    }
    let (_, substitutions, deletions, insertions) = prev[m];
    EditCounts {
        substitutions,
        deletions,
        insertions,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_tokens: usize,
    /// Percent.
    pub wer: f64,
}

/// Corpus-level token error rate.
pub fn wer(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<WerReport> {
    if hyps.len() != refs.len() {
        return Err(Error::arg(
            "wer",
            format!("{} hypotheses for {} references", hyps.len(), refs.len()),
        ));
    }
    let mut total = EditCounts::default();
    for (h, r) in hyps.iter().zip(refs) {
        let e = edit_counts(h, r);
        total.substitutions += e.substitutions;
        total.deletions += e.deletions;
        total.insertions += e.insertions;
    }
    let n: usize = refs.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::arg("wer", "references contain no tokens"));
    }
    Ok(WerReport {
        substitutions: total.substitutions,
        deletions: total.deletions,
        insertions: total.insertions,
        reference_tokens: n,
        wer: total.total() as f64 / n as f64 * 100.0,
    })
}

/// Nearest-rank percentile: `sorted[ceil(q * n) - 1]`. `None` for an empty sample.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// `(utterance id, latency in ms)` for every non-empty hypothesis.
    pub per_utterance: Vec<(String, f64)>,
    pub p50: Option<f64>,
    pub p90: Option<f64>,
    pub count: usize,
    /// Utterances whose hypothesis was empty.
    pub skipped: usize,
}

/// Signed latency of one record: `(last emission source frame - end of speech) * frame duration`.
pub fn utterance_latency(record: &EmissionRecord, end_of_speech_frame: usize) -> Option<f64> {
    record
        .last_source_frame()
        .map(|f| (f as f64 - end_of_speech_frame as f64) * record.frame_duration_ms)
}

pub fn latency(records: &[EmissionRecord], utts: &[Utterance]) -> Result<LatencyReport> {
    let eos: HashMap<&str, usize> = utts.iter().map(|u| (u.id.as_str(), u.end_of_speech_frame)).collect();
    let mut per_utterance = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for r in records {
        let end = *eos
            .get(r.id.as_str())
            .ok_or_else(|| Error::arg("latency", format!("no utterance with id `{}`", r.id)))?;
        match utterance_latency(r, end) {
            Some(ms) => per_utterance.push((r.id.clone(), ms)),
            None => skipped += 1,
        }
    }
    let values: Vec<f64> = per_utterance.iter().map(|(_, v)| *v).collect();
    Ok(LatencyReport {
        p50: percentile(&values, 0.5),
        p90: percentile(&values, 0.9),
        count: values.len(),
        skipped,
        per_utterance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub p50: f64,
    pub p90: f64,
}

/// The JSON report of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    /// Absent for full-context decoding and when no hypothesis was non-empty.
    pub latency_ms: Option<LatencySummary>,
    pub n: usize,
    pub skipped: usize,
}

/// Decoded utterances plus the derived report.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub records: Vec<EmissionRecord>,
    pub wer: WerReport,
    pub latency: Option<LatencyReport>,
    pub report: EvalReport,
}

/// Greedy-decodes every utterance in `mode`. With `lookahead_frames > 0`,
/// that many zero frames are appended before decoding and every emission
/// time is shifted by the same number of source frames.
pub fn evaluate(
    model: &DualModeModel,
    store: &ParamStore,
    utts: &[Utterance],
    mode: Mode,
    lookahead_frames: usize,
) -> Result<Evaluation> {
    let stride = model.config().encoder.stride;
    let mut records = Vec::with_capacity(utts.len());
    for u in utts {
        let x = if lookahead_frames > 0 {
            u.with_trailing_zeros(lookahead_frames).features
        } else {
            u.features.clone()
        };
        let hyp = model.decode(store, &x, mode)?;
        records.push(EmissionRecord::new(u.id.clone(), hyp, stride, lookahead_frames));
    }
    let hyps: Vec<Vec<usize>> = records.iter().map(|r| r.tokens.clone()).collect();
    let refs: Vec<Vec<usize>> = utts.iter().map(|u| u.transcript.clone()).collect();
    let w = wer(&hyps, &refs)?;
    let lat = match mode {
        Mode::Streaming => Some(latency(&records, utts)?),
        Mode::FullContext => None,
    };
    let report = EvalReport {
        wer: w.wer,
        substitutions: w.substitutions,
        deletions: w.deletions,
        insertions: w.insertions,
        latency_ms: lat.as_ref().and_then(|l| {
            Some(LatencySummary {
                p50: l.p50?,
                p90: l.p90?,
            })
        }),
        n: utts.len(),
        skipped: lat.as_ref().map_or(0, |l| l.skipped),
    };
    Ok(Evaluation {
        records,
        wer: w,
        latency: lat,
        report,
    })
}
