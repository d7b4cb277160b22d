//! Transducer (RNN-T) components: prediction network, joint network, loss,
//! and greedy decoding.

mod decode;
mod joint;
mod loss;
mod prediction;

pub use decode::{argmax, greedy_search, EmissionRecord, Hypothesis};
pub use joint::JointNet;
pub use loss::{
    backward_variables, forward_variables, rnnt_loss, rnnt_loss_and_grad, rnnt_loss_bruteforce, rnnt_loss_node,
    TransducerLattice, BRUTEFORCE_MAX_STEPS,
};
pub use prediction::PredictionNet;

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::layers::{Mode, Session};
use crate::params::{ParamInit, ParamStore};
use crate::tensor::{SeqLayout, Tensor, Var};

fn default_max_symbols() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransducerConfig {
    pub encoder: EncoderConfig,
    /// Number of non-blank tokens `V`; ids run `1..=V`.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub prediction_hidden: usize,
    pub joint_dim: usize,
    /// Greedy-search cap on tokens emitted at one encoder frame.
    #[serde(default = "default_max_symbols")]
    pub max_symbols_per_frame: usize,
}

impl Default for TransducerConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            vocab_size: 5,
            embed_dim: 16,
            prediction_hidden: 32,
            joint_dim: 32,
            max_symbols_per_frame: 4,
        }
    }
}

impl TransducerConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        for (field, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("prediction_hidden", self.prediction_hidden),
            ("joint_dim", self.joint_dim),
            ("max_symbols_per_frame", self.max_symbols_per_frame),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Encoder, prediction network and joint network.
#[derive(Debug, Clone)]
pub struct Transducer {
    cfg: TransducerConfig,
    encoder: Encoder,
    prediction: PredictionNet,
    joint: JointNet,
}

impl Transducer {
    pub fn build(cfg: &TransducerConfig, init: &mut ParamInit<'_>) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::build(&cfg.encoder, init)?;
        let prediction = PredictionNet::new(init, cfg.vocab_size, cfg.embed_dim, cfg.prediction_hidden)?;
        let joint = JointNet::new(
            init,
            cfg.encoder.channels,
            cfg.prediction_hidden,
            cfg.joint_dim,
            cfg.vocab_size,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            prediction,
            joint,
        })
    }

    pub fn config(&self) -> &TransducerConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn prediction(&self) -> &PredictionNet {
        &self.prediction
    }

    pub fn joint(&self) -> &JointNet {
        &self.joint
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.prediction.num_params() + self.joint.num_params()
    }

    /// Teacher-forced prediction states, one `[U_i + 1, hidden]` node per utterance.
    pub fn predict(&self, s: &mut Session<'_>, targets: &[Vec<usize>]) -> Result<Vec<Var>> {
        targets.iter().map(|y| self.prediction.forward(s, y)).collect()
    }

    /// One lattice node `[T'_i, U_i + 1, V + 1]` per utterance.
    pub fn lattices(&self, s: &mut Session<'_>, enc: &EncoderOutput, pred: &[Var]) -> Result<Vec<Var>> {
        if pred.len() != enc.layout.num_segments() {
            return Err(Error::arg(
                "lattices",
                format!("{} prediction inputs for {} utterances", pred.len(), enc.layout.num_segments()),
            ));
        }
        let enc_proj = self.joint.project_encoder(s, enc.hidden)?;
        let mut out = Vec::with_capacity(pred.len());
        for ((start, len), &g) in enc.layout.segments().zip(pred) {
            let e = s.graph.slice(enc_proj, 0, start, start + len)?;
            let p = self.joint.project_prediction(s, g)?;
            out.push(self.joint.combine(s, e, p)?);
        }
        Ok(out)
    }

    /// Lattice of one utterance outside training.
    pub fn lattice(&self, store: &ParamStore, x: &Tensor, y: &[usize], mode: Mode) -> Result<TransducerLattice> {
        let mut s = Session::new(store, false);
        let xv = s.input(x.clone());
        let enc = self.encoder.encode(&mut s, xv, &SeqLayout::single(x.rows()), mode)?;
        let pred = self.predict(&mut s, &[y.to_vec()])?;
        let lat = self.lattices(&mut s, &enc, &pred)?[0];
        TransducerLattice::new(s.value(lat).clone())
    }

    /// Greedy decoding of one utterance `[T, D]`.
    pub fn greedy_decode(&self, store: &ParamStore, x: &Tensor, mode: Mode) -> Result<Hypothesis> {
        let mut s = Session::new(store, false);
        let xv = s.input(x.clone());
        let enc = self.encoder.encode(&mut s, xv, &SeqLayout::single(x.rows()), mode)?;
        let frames = enc.layout.total();
        let enc_proj = self.joint.project_encoder(&mut s, enc.hidden)?;

        let h0 = self.prediction.zero_state(&mut s);
        let state = self.prediction.step(&mut s, h0, 0)?;
        let mut cached_len = 0;
        let mut state_proj = self.joint.project_prediction(&mut s, state)?;
        let mut state = state;
        greedy_search(frames, self.cfg.max_symbols_per_frame, |t, prefix| {
            if prefix.len() != cached_len {
                state = self.prediction.step(&mut s, state, prefix[prefix.len() - 1])?;
                state_proj = self.joint.project_prediction(&mut s, state)?;
                cached_len = prefix.len();
            }
            let e = s.graph.slice(enc_proj, 0, t - 1, t)?;
            let z = self.joint.combine(&mut s, e, state_proj)?;
            Ok(s.value(z).data().to_vec())
        })
    }
}
