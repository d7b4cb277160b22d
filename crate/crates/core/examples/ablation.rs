//! The weight-sharing / joint-training / distillation grid plus a standalone
//! streaming model, at a budget that runs in about a minute.
//!
//! ```text
//! cargo run --release --example ablation -- [config.json] [seed,...]
//! ```

use std::path::Path;

use dualmode::experiment::{format_ablation_table, run_ablation, AblationVariant, ExperimentConfig};

fn main() -> dualmode::Result<()> {
    let mut args = std::env::args().skip(1);
    let cfg = match args.next() {
        Some(p) => ExperimentConfig::load(Path::new(&p))?,
        None => ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ablation.json"))?,
    };
    let seeds: Vec<u64> = args
        .next()
        .map(|s| s.split(',').map(|x| x.parse().expect("seed")).collect())
        .unwrap_or_else(|| vec![cfg.seed]);
    let mut variants = AblationVariant::GRID.to_vec();
    variants.push(AblationVariant::StandaloneStreaming);
    let rows = run_ablation(&cfg, &variants, &seeds)?;
    print!("{}", format_ablation_table(&rows));
    Ok(())
}
