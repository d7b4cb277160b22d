//! Trains a small dual-mode model on the synthetic task and reports WER and
//! emission latency in both modes.
//!
//! ```text
//! cargo run --release --example train_dual_mode -- [steps] [seed]
//! ```

use std::time::Instant;

use dualmode::eval::evaluate;
use dualmode::experiment::{run_training, ExperimentConfig};
use dualmode::Mode;

fn main() -> dualmode::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = ExperimentConfig::default();
    if let Some(steps) = args.next() {
        cfg.train.steps = steps.parse().expect("steps must be an integer");
    }
    if let Some(seed) = args.next() {
        cfg.seed = seed.parse().expect("seed must be an integer");
    }
    cfg.train.log_every = (cfg.train.steps / 10).max(1);

    let start = Instant::now();
    let out = run_training(&cfg, None)?;
    for rec in &out.metrics {
        println!(
            "step {:>5}  lr {:.4}  full {:.3}  stream {:.3}  distill {:.4}",
            rec.step,
            rec.lr,
            rec.loss_full.unwrap_or(f64::NAN),
            rec.loss_stream.unwrap_or(f64::NAN),
            rec.loss_distill.unwrap_or(f64::NAN),
        );
    }
    println!("trained {} steps in {:.1?}", cfg.train.steps, start.elapsed());

    let eval_data = cfg.eval_data()?;
    for mode in Mode::BOTH {
        let ev = evaluate(&out.model, &out.store, &eval_data, mode, 0)?;
        let lat = ev
            .report
            .latency_ms
            .map(|l| format!("latency@50 {:>6.1} ms  latency@90 {:>6.1} ms", l.p50, l.p90))
            .unwrap_or_default();
        println!("{mode:<12} WER {:>6.2}%  {lat}", ev.report.wer);
    }
    Ok(())
}
