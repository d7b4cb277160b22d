//! Streaming emission lattices of a dual-mode model next to a standalone
//! streaming model, written as CSV and SVG.
//!
//! ```text
//! cargo run --release --example export_lattice -- [out_dir]
//! ```

use dualmode::eval::export_lattice;
use dualmode::experiment::{run_training, AblationVariant, ExperimentConfig};
use dualmode::transducer::EmissionRecord;
use dualmode::Mode;

fn main() -> dualmode::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dualmode-lattices"));
    let mut base = ExperimentConfig::default();
    base.train.steps = 800;
    base.train.log_every = 800;
    let utts = base.eval_data()?;
    let utt = &utts[0];

    for variant in [AblationVariant::SharedJointDistill, AblationVariant::StandaloneStreaming] {
        let cfg = variant.apply(&base);
        let out = run_training(&cfg, None)?;
        let hyp = out.model.decode(&out.store, &utt.features, Mode::Streaming)?;
        let record = EmissionRecord::new(utt.id.clone(), hyp, cfg.model.encoder.stride, 0);
        let name = variant.label().replace([' ', '+'], "_");
        for p in export_lattice(&record, utt.num_frames(), utt.end_of_speech_frame, &dir.join(format!("{name}.svg")))? {
            println!("wrote {}", p.display());
        }
        println!("  {}: {:?} at source frames {:?}", variant.label(), record.tokens, record.source_frames());
    }
    println!("reference {:?}, end of speech at frame {}", utt.transcript, utt.end_of_speech_frame);
    Ok(())
}
