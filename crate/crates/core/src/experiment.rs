//! Experiment configuration, training runs with logs and checkpoints, and
//! the ablation grid.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{generate_utterances, load_manifest, SynthTaskConfig, Utterance};
use crate::encoder::EncoderVariant;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::layers::Mode;
use crate::model::{DualModeModel, WeightSharing};
use crate::params::ParamStore;
use crate::training::{MetricsRecord, ModeStrategy, TrainConfig, Trainer};
use crate::transducer::TransducerConfig;

fn default_train_utterances() -> usize {
    1000
}

fn default_eval_utterances() -> usize {
    100
}

/// Where utterances come from. Without manifests, the synthetic task is
/// generated in memory: the first `train_utterances` for training, the
/// next `eval_utterances` for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default)]
    pub train_manifest: Option<PathBuf>,
    #[serde(default)]
    pub eval_manifest: Option<PathBuf>,
    #[serde(default = "default_train_utterances")]
    pub train_utterances: usize,
    #[serde(default = "default_eval_utterances")]
    pub eval_utterances: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: None,
            eval_manifest: None,
            train_utterances: default_train_utterances(),
            eval_utterances: default_eval_utterances(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: TransducerConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub task: SynthTaskConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            model: TransducerConfig::default(),
            train: TrainConfig::default(),
            task: SynthTaskConfig::default(),
            data: DataConfig::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config. Relative paths inside it are resolved against
    /// the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        resolve(&mut cfg.data.train_manifest);
        resolve(&mut cfg.data.eval_manifest);
        resolve(&mut cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        if self.task.vocab_size != self.model.vocab_size {
            return Err(Error::config(
                "task.vocab_size",
                format!("{} differs from model.vocab_size {}", self.task.vocab_size, self.model.vocab_size),
            ));
        }
        if self.task.feature_dim != self.model.encoder.feature_dim {
            return Err(Error::config(
                "task.feature_dim",
                format!(
                    "{} differs from model.encoder.feature_dim {}",
                    self.task.feature_dim, self.model.encoder.feature_dim
                ),
            ));
        }
        Ok(())
    }

    fn generated(&self) -> Result<Vec<Utterance>> {
        generate_utterances(&self.task, self.data.train_utterances + self.data.eval_utterances)
    }

    pub fn train_data(&self) -> Result<Vec<Utterance>> {
        match &self.data.train_manifest {
            Some(p) => load_manifest(p, self.model.vocab_size),
            None => {
                let mut all = self.generated()?;
                all.truncate(self.data.train_utterances);
                Ok(all)
            }
        }
    }

    pub fn eval_data(&self) -> Result<Vec<Utterance>> {
        match &self.data.eval_manifest {
            Some(p) => load_manifest(p, self.model.vocab_size),
            None => Ok(self.generated()?.split_off(self.data.train_utterances)),
        }
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.dmck";

pub fn checkpoint_name(step: usize) -> String {
    format!("step-{step:06}.dmck")
}

/// A finished training run.
pub struct TrainingOutcome {
    pub model: DualModeModel,
    pub store: ParamStore,
    pub metrics: Vec<MetricsRecord>,
}

/// Trains according to `cfg`. With `out_dir`, writes `metrics.jsonl`,
/// periodic checkpoints and `final.dmck` there.
pub fn run_training(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let data = cfg.train_data()?;
    let mut trainer = Trainer::new(&cfg.model, &cfg.train, cfg.seed, &data)?;
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(METRICS_FILE);
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut metrics = Vec::new();
    while trainer.steps_done() < cfg.train.steps {
        let (_, rec) = trainer.step()?;
        let step = rec.step;
        if step % cfg.train.log_every == 0 || step == cfg.train.steps {
            if let Some((f, p)) = &mut log {
                writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&*p, e))?;
            }
            metrics.push(rec);
        }
        if let (Some(dir), Some(every)) = (out_dir, cfg.train.checkpoint_every) {
            if step % every == 0 {
                save_checkpoint(&dir.join(checkpoint_name(step)), &trainer.store, cfg, step)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join(FINAL_CHECKPOINT), &trainer.store, cfg, trainer.steps_done())?;
    }
    Ok(TrainingOutcome {
        model: trainer.model,
        store: trainer.store,
        metrics,
    })
}

/// One configuration of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    SharedJointDistill,
    SharedJoint,
    SharedSampled,
    SeparateJointDistill,
    /// Streaming-only encoder trained on the streaming loss alone.
    StandaloneStreaming,
}

impl AblationVariant {
    /// The four rows of the weight-sharing / joint-training / distillation grid.
    pub const GRID: [AblationVariant; 4] = [
        AblationVariant::SharedJointDistill,
        AblationVariant::SharedJoint,
        AblationVariant::SharedSampled,
        AblationVariant::SeparateJointDistill,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::SharedJointDistill => "shared+joint+distill",
            Self::SharedJoint => "shared+joint",
            Self::SharedSampled => "shared+sampled",
            Self::SeparateJointDistill => "separate+joint+distill",
            Self::StandaloneStreaming => "standalone streaming",
        }
    }

    /// `base` adjusted to this variant.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        let t = &mut cfg.train;
        match self {
            Self::SharedJointDistill => {
                t.weight_sharing = WeightSharing::Shared;
                t.mode_strategy = ModeStrategy::Joint;
                t.distill = true;
            }
            Self::SharedJoint => {
                t.weight_sharing = WeightSharing::Shared;
                t.mode_strategy = ModeStrategy::Joint;
                t.distill = false;
            }
            Self::SharedSampled => {
                t.weight_sharing = WeightSharing::Shared;
                t.mode_strategy = ModeStrategy::Sampled;
                t.distill = false;
            }
            Self::SeparateJointDistill => {
                t.weight_sharing = WeightSharing::Separate;
                t.mode_strategy = ModeStrategy::Joint;
                t.distill = true;
            }
            Self::StandaloneStreaming => {
                cfg.model.encoder.variant = EncoderVariant::StreamingOnly;
                t.weight_sharing = WeightSharing::Shared;
                t.mode_strategy = ModeStrategy::Sampled;
                t.streaming_prob = 1.0;
                t.distill = false;
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub label: String,
    pub seed: u64,
    pub streaming_wer: f64,
    pub latency_p50_ms: Option<f64>,
    pub latency_p90_ms: Option<f64>,
    /// Absent for the streaming-only model.
    pub fullcontext_wer: Option<f64>,
}

/// Trains and evaluates one variant on the experiment's data.
pub fn run_variant(base: &ExperimentConfig, variant: AblationVariant, seed: u64) -> Result<AblationRow> {
    let mut cfg = variant.apply(base);
    cfg.seed = seed;
    let out = run_training(&cfg, None)?;
    let eval_data = cfg.eval_data()?;
    let stream = evaluate(&out.model, &out.store, &eval_data, Mode::Streaming, 0)?;
    let full = if out.model.supports(Mode::FullContext) {
        Some(evaluate(&out.model, &out.store, &eval_data, Mode::FullContext, 0)?.report.wer)
    } else {
        None
    };
    Ok(AblationRow {
        variant,
        label: variant.label().to_owned(),
        seed,
        streaming_wer: stream.report.wer,
        latency_p50_ms: stream.report.latency_ms.map(|l| l.p50),
        latency_p90_ms: stream.report.latency_ms.map(|l| l.p90),
        fullcontext_wer: full,
    })
}

/// Runs `variants` for every seed, seed-major.
pub fn run_ablation(base: &ExperimentConfig, variants: &[AblationVariant], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for &seed in seeds {
        for &v in variants {
            rows.push(run_variant(base, v, seed)?);
        }
    }
    Ok(rows)
}

/// Aligned plain-text table of ablation rows.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let fmt_opt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |v| format!("{v:.1}"));
    let mut out = format!(
        "{:<24} {:>6} {:>12} {:>10} {:>10} {:>12}\n",
        "variant", "seed", "stream WER", "lat@50", "lat@90", "full WER"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<24} {:>6} {:>12.2} {:>10} {:>10} {:>12}\n",
            r.label,
            r.seed,
            r.streaming_wer,
            fmt_opt(r.latency_p50_ms),
            fmt_opt(r.latency_p90_ms),
            r.fullcontext_wer.map_or_else(|| "-".to_owned(), |v| format!("{v:.2}")),
        ));
    }
    out
}
