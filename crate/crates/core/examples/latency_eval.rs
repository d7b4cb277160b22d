//! Emission latency and token error rate: trains briefly, then decodes the
//! held-out set in streaming mode with and without look-ahead.
//!
//! ```text
//! cargo run --release --example latency_eval -- [steps]
//! ```

use dualmode::eval::{evaluate, percentile};
use dualmode::experiment::{run_training, ExperimentConfig};
use dualmode::Mode;

fn main() -> dualmode::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.train.steps = std::env::args().nth(1).map_or(800, |s| s.parse().expect("steps"));
    cfg.train.log_every = cfg.train.steps;
    let out = run_training(&cfg, None)?;
    let utts = cfg.eval_data()?;

    for lookahead in [0, 2, 6] {
        let ev = evaluate(&out.model, &out.store, &utts, Mode::Streaming, lookahead)?;
        let lat = ev.latency.as_ref().expect("streaming has latency");
        let values: Vec<f64> = lat.per_utterance.iter().map(|(_, v)| *v).collect();
        println!(
            "look-ahead {lookahead} frames: WER {:.2}%, latency@50 {:?} ms, @90 {:?} ms, max {:?} ms, skipped {}",
            ev.wer.wer,
            lat.p50,
            lat.p90,
            percentile(&values, 1.0),
            lat.skipped
        );
    }

    let ev = evaluate(&out.model, &out.store, &utts[..3], Mode::Streaming, 0)?;
    for (rec, u) in ev.records.iter().zip(&utts) {
        println!(
            "{}: ref {:?} hyp {:?} emitted at source frames {:?}, end of speech {}",
            rec.id,
            u.transcript,
            rec.tokens,
            rec.source_frames(),
            u.end_of_speech_frame
        );
    }
    Ok(())
}
