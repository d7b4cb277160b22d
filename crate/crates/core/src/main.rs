use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dualmode::checkpoint::load_checkpoint;
use dualmode::data::{generate_dataset, load_manifest};
use dualmode::eval::{evaluate, export_lattice};
use dualmode::experiment::{format_ablation_table, run_ablation, run_training, AblationVariant, ExperimentConfig};
use dualmode::transducer::EmissionRecord;
use dualmode::{Error, Mode};

#[derive(Parser)]
#[command(name = "dualmode", version, about = "Dual-mode (streaming + full-context) transducer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Streaming,
    Fullcontext,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Streaming => Mode::Streaming,
            ModeArg::Fullcontext => Mode::FullContext,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifest + feature files).
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of utterances (default: data.train_utterances).
        #[arg(long)]
        count: Option<usize>,
        /// Replaces the task seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Train a model; writes metrics.jsonl and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: output_dir from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Decode a dataset and report WER and emission latency.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest or dataset directory (default: the evaluation data of the checkpoint's config).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "streaming")]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        lookahead_frames: usize,
        /// Report file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the weight-sharing / joint-training / distillation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
        /// Comma-separated seeds (default: the config seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Write the emission lattice of one utterance as CSV (and SVG for a .svg path).
    ExportLattice {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        utterance_id: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "streaming")]
        mode: ModeArg,
    },
}

fn load_config(path: &Path, seed_override: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn output_dir(out: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf, String> {
    out.or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| "no output directory: pass --out or set output_dir in the config".to_owned())
}

fn write_out(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_owned(),
            source: e,
        }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData {
            config,
            out,
            count,
            seed_override,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let mut task = cfg.task.clone();
            if let Some(s) = seed_override {
                task.seed = s;
            }
            let n = count.unwrap_or(cfg.data.train_utterances);
            let utts = generate_dataset(&task, n, &out)?;
            eprintln!("wrote {} utterances to {}", utts.len(), out.display());
        }
        Command::Train {
            config,
            out,
            seed_override,
        } => {
            let cfg = load_config(&config, seed_override)?;
            let dir = output_dir(out, &cfg).map_err(Failure::Usage)?;
            let outcome = run_training(&cfg, Some(&dir))?;
            if let Some(last) = outcome.metrics.last() {
                println!("{}", serde_json::to_string(last).map_err(Error::from)?);
            }
            eprintln!("checkpoints and metrics in {}", dir.display());
        }
        Command::Evaluate {
            checkpoint,
            data,
            mode,
            lookahead_frames,
            out,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let utts = match data {
                Some(p) => load_manifest(&p, ck.header.config.model.vocab_size)?,
                None => ck.header.config.eval_data()?,
            };
            let ev = evaluate(&ck.model, &ck.store, &utts, mode.into(), lookahead_frames)?;
            let json = serde_json::to_string_pretty(&ev.report).map_err(Error::from)?;
            write_out(out.as_deref(), &json)?;
        }
        Command::Ablate {
            config,
            out,
            seed_override,
            seeds,
        } => {
            let cfg = load_config(&config, seed_override)?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let rows = run_ablation(&cfg, &AblationVariant::GRID, &seeds)?;
            let table = format_ablation_table(&rows);
            print!("{table}");
            if let Some(dir) = out.or_else(|| cfg.output_dir.clone()) {
                fs::create_dir_all(&dir).map_err(|e| Error::Io {
                    path: dir.clone(),
                    source: e,
                })?;
                let json = serde_json::to_string_pretty(&rows).map_err(Error::from)?;
                write_out(Some(&dir.join("ablation.json")), &json)?;
                write_out(Some(&dir.join("ablation.txt")), &table)?;
            }
        }
        Command::ExportLattice {
            checkpoint,
            data,
            utterance_id,
            out,
            mode,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let utts = match data {
                Some(p) => load_manifest(&p, ck.header.config.model.vocab_size)?,
                None => ck.header.config.eval_data()?,
            };
            let utt = utts
                .iter()
                .find(|u| u.id == utterance_id)
                .ok_or_else(|| Error::Utterance {
                    id: utterance_id.clone(),
                    reason: "not found in the dataset".into(),
                })?;
            let hyp = ck.model.decode(&ck.store, &utt.features, mode.into())?;
            let record = EmissionRecord::new(utt.id.clone(), hyp, ck.model.config().encoder.stride, 0);
            for p in export_lattice(&record, utt.num_frames(), utt.end_of_speech_frame, &out)? {
                eprintln!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
