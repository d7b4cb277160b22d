//! Renders a few synthetic utterances, writes them as a dataset and reads
//! them back.
//!
//! ```text
//! cargo run --example synthetic_data -- [out_dir]
//! ```

use dualmode::data::{generate_dataset, load_manifest, SynthTaskConfig};

fn main() -> dualmode::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dualmode-synthetic"));
    let cfg = SynthTaskConfig::default();
    let utts = generate_dataset(&cfg, 4, &dir)?;
    for u in &utts {
        println!(
            "{}: tokens {:?}, {} frames, end of speech at frame {}",
            u.id,
            u.transcript,
            u.num_frames(),
            u.end_of_speech_frame
        );
    }

    let first = &utts[0];
    println!("\nframes of {} (argmax channel, onset cue):", first.id);
    for t in 0..first.num_frames() {
        let row = first.features.row(t);
        let arg = (0..cfg.vocab_size)
            .max_by(|&a, &b| row[a].total_cmp(&row[b]))
            .expect("non-empty");
        let onset = cfg.onset_channel().map(|c| row[c]).unwrap_or(0.0);
        println!("  {:>3}  channel {}  onset {:+.2}", t + 1, arg, onset);
    }

    let back = load_manifest(&dir, cfg.vocab_size)?;
    assert_eq!(back, utts);
    println!("\nwrote and re-read {} utterances in {}", back.len(), dir.display());
    Ok(())
}
