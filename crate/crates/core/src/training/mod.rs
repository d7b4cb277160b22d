//! Joint dual-mode training with inplace distillation, randomly sampled
//! training, and the optimizer.

mod distill;
mod optim;

pub use distill::{
    collapse, distill_loss_node, distill_terms, inplace_distill_loss, kl_divergence, teacher_frame, DistillTerms,
};
pub use optim::{clip_global_norm, learning_rate, Adam};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PackedBatch, Utterance};
use crate::error::{Error, Result};
use crate::layers::{Mode, Session};
use crate::model::{DualModeModel, WeightSharing};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Gradients, SeqLayout, Tensor, Var};
use crate::transducer::{rnnt_loss_node, Transducer, TransducerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeStrategy {
    /// Both modes (plus distillation) in every step.
    #[default]
    Joint,
    /// One randomly drawn mode per step.
    Sampled,
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

fn yes() -> bool {
    true
}

fn default_log_every() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub mode_strategy: ModeStrategy,
    #[serde(default)]
    pub weight_sharing: WeightSharing,
    #[serde(default = "yes")]
    pub distill: bool,
    #[serde(default = "one")]
    pub w_full: f64,
    #[serde(default = "one")]
    pub w_stream: f64,
    #[serde(default = "one")]
    pub w_distill: f64,
    /// Teacher shift `s` in encoder frames.
    #[serde(default)]
    pub teacher_shift: i64,
    /// Probability of drawing Streaming under the sampled strategy.
    #[serde(default = "half")]
    pub streaming_prob: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 4,
            learning_rate: 0.003,
            warmup_steps: 20,
            grad_clip: Some(5.0),
            mode_strategy: ModeStrategy::Joint,
            weight_sharing: WeightSharing::Shared,
            distill: true,
            w_full: 1.0,
            w_stream: 1.0,
            w_distill: 1.0,
            teacher_shift: 0,
            streaming_prob: 0.5,
            log_every: 10,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, w) in [
            ("w_full", self.w_full),
            ("w_stream", self.w_stream),
            ("w_distill", self.w_distill),
            ("learning_rate", self.learning_rate),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config(field, format!("must be finite and non-negative, got {w}")));
            }
        }
        if !(0.0..=1.0).contains(&self.streaming_prob) {
            return Err(Error::config("streaming_prob", "must lie in [0, 1]"));
        }
        if !(-2..=2).contains(&self.teacher_shift) {
            return Err(Error::config("teacher_shift", "must lie in -2..=2"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be at least 1"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("checkpoint_every", "must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config("grad_clip", "must be positive"));
            }
        }
        Ok(())
    }

    /// Whether a distillation term is computed at all.
    pub fn distill_active(&self) -> bool {
        self.distill && self.mode_strategy == ModeStrategy::Joint
    }
}

/// Losses of one step. Components that were not computed are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub mode_chosen: Option<Mode>,
    pub loss_full: Option<f64>,
    pub loss_stream: Option<f64>,
    pub loss_distill: Option<f64>,
    pub loss_total: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss_full: Option<f64>,
    pub loss_stream: Option<f64>,
    pub loss_distill: Option<f64>,
    pub lr: f64,
}

/// Draws Streaming with probability `p`, otherwise FullContext.
pub fn sample_mode(rng: &mut impl Rng, p: f64) -> Mode {
    if rng.gen_bool(p) {
        Mode::Streaming
    } else {
        Mode::FullContext
    }
}

/// Forward pass of one mode: per-utterance lattices and the batch-mean transducer loss.
struct ModePass {
    lattices: Vec<Var>,
    loss: Var,
}

fn mode_pass(s: &mut Session<'_>, net: &Transducer, batch: &PackedBatch, layout: &SeqLayout, pred: &[Var], mode: Mode) -> Result<ModePass> {
    let x = s.input(batch.features.clone());
    let enc = net.encoder().encode(s, x, layout, mode)?;
    let lattices = net.lattices(s, &enc, pred)?;
    let mut total: Option<Var> = None;
    for (lat, y) in lattices.iter().zip(&batch.targets) {
        let l = rnnt_loss_node(&mut s.graph, *lat, y)?;
        total = Some(match total {
            None => l,
            Some(t) => s.graph.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::arg("train_step", "empty batch"))?;
    let loss = s.graph.scale(total, 1.0 / batch.len() as f64);
    Ok(ModePass { lattices, loss })
}

/// Loss value, gradients and buffer updates of one step, before the optimizer.
pub struct StepGradients {
    pub output: StepOutput,
    pub grads: Vec<(ParamId, Tensor)>,
    pub stat_updates: Vec<(ParamId, Tensor)>,
}

fn check_finite(value: f64, component: &'static str, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { component, step })
    }
}

/// Forward and backward of the joint objective
/// `w_full * L_full + w_stream * L_stream + w_distill * L_distill`.
pub fn joint_gradients(model: &DualModeModel, store: &ParamStore, batch: &PackedBatch, cfg: &TrainConfig, step: usize) -> Result<StepGradients> {
    let mut s = Session::new(store, true);
    let layout = &batch.layout;
    let full_net = model.net(Mode::FullContext)?;
    let stream_net = model.net(Mode::Streaming)?;
    let pred_full = full_net.predict(&mut s, &batch.targets)?;
    let pred_stream = match model.sharing() {
        WeightSharing::Shared => pred_full.clone(),
        WeightSharing::Separate => stream_net.predict(&mut s, &batch.targets)?,
    };
    let full = mode_pass(&mut s, full_net, batch, layout, &pred_full, Mode::FullContext)?;
    let stream = mode_pass(&mut s, stream_net, batch, layout, &pred_stream, Mode::Streaming)?;
    let loss_full = check_finite(s.value(full.loss).item(), "full-context", step)?;
    let loss_stream = check_finite(s.value(stream.loss).item(), "streaming", step)?;

    let wf = s.graph.scale(full.loss, cfg.w_full);
    let ws = s.graph.scale(stream.loss, cfg.w_stream);
    let mut total = s.graph.add(wf, ws)?;
    let mut loss_distill = None;
    if cfg.distill {
        let pairs: Vec<(Var, Var, &[usize])> = full
            .lattices
            .iter()
            .zip(&stream.lattices)
            .zip(&batch.targets)
            .map(|((&t, &st), y)| (t, st, y.as_slice()))
            .collect();
        let d = distill_loss_node(&mut s.graph, &pairs, cfg.teacher_shift)?;
        loss_distill = Some(check_finite(s.value(d).item(), "distillation", step)?);
        let wd = s.graph.scale(d, cfg.w_distill);
        total = s.graph.add(total, wd)?;
    }
    let loss_total = s.value(total).item();
    let grads = s.graph.backward(total)?;
    Ok(StepGradients {
        output: StepOutput {
            mode_chosen: None,
            loss_full: Some(loss_full),
            loss_stream: Some(loss_stream),
            loss_distill,
            loss_total,
        },
        grads: collect_grads(&grads, step)?,
        stat_updates: s.take_stat_updates(),
    })
}

/// Forward and backward of a single mode's transducer loss.
pub fn single_mode_gradients(model: &DualModeModel, store: &ParamStore, batch: &PackedBatch, mode: Mode, step: usize) -> Result<StepGradients> {
    let mut s = Session::new(store, true);
    let net = model.net(mode)?;
    let pred = net.predict(&mut s, &batch.targets)?;
    let pass = mode_pass(&mut s, net, batch, &batch.layout, &pred, mode)?;
    let component = match mode {
        Mode::Streaming => "streaming",
        Mode::FullContext => "full-context",
    };
    let loss = check_finite(s.value(pass.loss).item(), component, step)?;
    let grads = s.graph.backward(pass.loss)?;
    Ok(StepGradients {
        output: StepOutput {
            mode_chosen: Some(mode),
            loss_full: (mode == Mode::FullContext).then_some(loss),
            loss_stream: (mode == Mode::Streaming).then_some(loss),
            loss_distill: None,
            loss_total: loss,
        },
        grads: collect_grads(&grads, step)?,
        stat_updates: s.take_stat_updates(),
    })
}

fn collect_grads(grads: &Gradients, step: usize) -> Result<Vec<(ParamId, Tensor)>> {
    let out: Vec<(ParamId, Tensor)> = grads.params().into_iter().map(|(k, g)| (ParamId(k), g)).collect();
    if out.iter().any(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite {
            component: "gradient",
            step,
        });
    }
    Ok(out)
}

fn apply(store: &mut ParamStore, opt: &mut Adam, mut sg: StepGradients, cfg: &TrainConfig, lr: f64) -> Result<StepOutput> {
    if let Some(c) = cfg.grad_clip {
        clip_global_norm(&mut sg.grads, c);
    }
    opt.update(store, &sg.grads, lr)?;
    for (id, t) in sg.stat_updates {
        store.set(id, t)?;
    }
    Ok(sg.output)
}

/// One joint step: both modes, optional distillation, one optimizer update.
pub fn joint_train_step(
    model: &DualModeModel,
    store: &mut ParamStore,
    opt: &mut Adam,
    batch: &PackedBatch,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepOutput> {
    let step = opt.steps() + 1;
    let sg = joint_gradients(model, store, batch, cfg, step)?;
    apply(store, opt, sg, cfg, lr)
}

/// One sampled step: a single mode drawn with `P(Streaming) = streaming_prob`.
pub fn sampled_train_step(
    model: &DualModeModel,
    store: &mut ParamStore,
    opt: &mut Adam,
    batch: &PackedBatch,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
    lr: f64,
) -> Result<StepOutput> {
    let step = opt.steps() + 1;
    let mode = sample_mode(rng, cfg.streaming_prob);
    let sg = single_mode_gradients(model, store, batch, mode, step)?;
    apply(store, opt, sg, cfg, lr)
}

/// Random streams derived from the experiment seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const DATA_ORDER: u64 = 1;
    pub const MODE: u64 = 2;
}

/// Seeded generator for one of the [`streams`].
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Parameter-initialization seed derived from the experiment seed.
pub fn init_seed(seed: u64) -> u64 {
    stream_rng(seed, streams::INIT).gen()
}

/// Stateful training loop over an in-memory dataset.
pub struct Trainer<'d> {
    pub model: DualModeModel,
    pub store: ParamStore,
    cfg: TrainConfig,
    opt: Adam,
    data: &'d [Utterance],
    order: Vec<usize>,
    cursor: usize,
    order_rng: ChaCha8Rng,
    mode_rng: ChaCha8Rng,
}

impl<'d> Trainer<'d> {
    pub fn new(model_cfg: &TransducerConfig, cfg: &TrainConfig, seed: u64, data: &'d [Utterance]) -> Result<Self> {
        cfg.validate()?;
        let (store, model) = DualModeModel::init(model_cfg, cfg.weight_sharing, init_seed(seed))?;
        Self::from_parts(model, store, cfg, seed, data)
    }

    /// Continues from an existing model and parameters (fresh optimizer state).
    pub fn from_parts(model: DualModeModel, store: ParamStore, cfg: &TrainConfig, seed: u64, data: &'d [Utterance]) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode_strategy == ModeStrategy::Joint && !model.supports(Mode::FullContext) {
            return Err(Error::config(
                "mode_strategy",
                "joint training needs a model that supports full-context mode",
            ));
        }
        if cfg.mode_strategy == ModeStrategy::Sampled && cfg.streaming_prob < 1.0 && !model.supports(Mode::FullContext) {
            return Err(Error::config(
                "streaming_prob",
                "a streaming-only model can only be trained with streaming_prob = 1",
            ));
        }
        let v = model.config().vocab_size;
        for u in data {
            if let Some(&t) = u.transcript.iter().find(|&&t| t == 0 || t > v) {
                return Err(Error::Utterance {
                    id: u.id.clone(),
                    reason: format!("token {t} outside 1..={v}"),
                });
            }
            if u.features.cols() != model.config().encoder.feature_dim {
                return Err(Error::Utterance {
                    id: u.id.clone(),
                    reason: format!(
                        "feature dim {} but the encoder expects {}",
                        u.features.cols(),
                        model.config().encoder.feature_dim
                    ),
                });
            }
        }
        Ok(Self {
            model,
            store,
            cfg: cfg.clone(),
            opt: Adam::new(),
            data,
            order: Vec::new(),
            cursor: 0,
            order_rng: stream_rng(seed, streams::DATA_ORDER),
            mode_rng: stream_rng(seed, streams::MODE),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Optimizer updates applied so far.
    pub fn steps_done(&self) -> usize {
        self.opt.steps()
    }

    pub fn optimizer(&self) -> &Adam {
        &self.opt
    }

    /// Next batch in the seeded epoch order.
    pub fn next_batch(&mut self) -> Result<PackedBatch> {
        if self.data.is_empty() {
            return Err(Error::arg("train", "no training utterances"));
        }
        let mut picked = Vec::with_capacity(self.cfg.batch_size);
        while picked.len() < self.cfg.batch_size.min(self.data.len()) {
            if self.cursor == self.order.len() {
                self.order = (0..self.data.len()).collect();
                self.order.shuffle(&mut self.order_rng);
                self.cursor = 0;
            }
            picked.push(&self.data[self.order[self.cursor]]);
            self.cursor += 1;
        }
        PackedBatch::from_utterances(&picked)
    }

    /// Learning rate of the next update.
    pub fn next_lr(&self) -> f64 {
        learning_rate(self.cfg.learning_rate, self.cfg.warmup_steps, self.opt.steps() + 1)
    }

    pub fn step(&mut self) -> Result<(StepOutput, MetricsRecord)> {
        let batch = self.next_batch()?;
        let lr = self.next_lr();
        let out = match self.cfg.mode_strategy {
            ModeStrategy::Joint => joint_train_step(&self.model, &mut self.store, &mut self.opt, &batch, &self.cfg, lr)?,
            ModeStrategy::Sampled => sampled_train_step(
                &self.model,
                &mut self.store,
                &mut self.opt,
                &batch,
                &self.cfg,
                &mut self.mode_rng,
                lr,
            )?,
        };
        let record = MetricsRecord {
            step: self.opt.steps(),
            loss_full: out.loss_full,
            loss_stream: out.loss_stream,
            loss_distill: out.loss_distill,
            lr,
        };
        Ok((out, record))
    }

    /// Runs the remaining steps, returning the log records (every
    /// `log_every` steps and the last one).
    pub fn run(&mut self) -> Result<Vec<MetricsRecord>> {
        let mut log = Vec::new();
        while self.opt.steps() < self.cfg.steps {
            let (_, rec) = self.step()?;
            if rec.step % self.cfg.log_every == 0 || rec.step == self.cfg.steps {
                log.push(rec);
            }
        }
        Ok(log)
    }
}

/// Per-utterance transducer losses of a batch in one mode (no update).
pub fn utterance_losses(model: &DualModeModel, store: &ParamStore, batch: &PackedBatch, mode: Mode) -> Result<Vec<f64>> {
    let mut s = Session::new(store, false);
    let net = model.net(mode)?;
    let pred = net.predict(&mut s, &batch.targets)?;
    let x = s.input(batch.features.clone());
    let enc = net.encoder().encode(&mut s, x, &batch.layout, mode)?;
    let lattices = net.lattices(&mut s, &enc, &pred)?;
    lattices
        .iter()
        .zip(&batch.targets)
        .map(|(&l, y)| {
            let lat = crate::transducer::TransducerLattice::new(s.value(l).clone())?;
            crate::transducer::rnnt_loss(&lat, y)
        })
        .collect()
}
