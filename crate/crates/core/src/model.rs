//! A transducer that serves both modes, either with one shared set of
//! weights or as two independent networks (the weight-sharing ablation).

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderVariant, ParamAccounting};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::params::{ParamInit, ParamStore};
use crate::tensor::Tensor;
use crate::transducer::{Hypothesis, Transducer, TransducerConfig, TransducerLattice};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSharing {
    #[default]
    Shared,
    /// One full transducer per mode, nothing shared.
    Separate,
}

#[derive(Debug, Clone)]
pub struct DualModeModel {
    sharing: WeightSharing,
    nets: Vec<Transducer>,
}

impl DualModeModel {
    pub fn build(cfg: &TransducerConfig, sharing: WeightSharing, init: &mut ParamInit<'_>) -> Result<Self> {
        let nets = match sharing {
            WeightSharing::Shared => vec![Transducer::build(cfg, init)?],
            WeightSharing::Separate => {
                if cfg.encoder.variant == EncoderVariant::StreamingOnly {
                    return Err(Error::config(
                        "weight_sharing",
                        "separate networks need a dual-mode encoder for the full-context branch",
                    ));
                }
                let mut nets = Vec::with_capacity(2);
                for mode in Mode::BOTH {
                    nets.push(init.scoped(mode.as_str(), |init| Transducer::build(cfg, init))?);
                }
                nets
            }
        };
        Ok(Self { sharing, nets })
    }

    /// Builds the model in a fresh store from `seed`.
    pub fn init(cfg: &TransducerConfig, sharing: WeightSharing, seed: u64) -> Result<(ParamStore, Self)> {
        let mut store = ParamStore::new();
        let model = Self::build(cfg, sharing, &mut ParamInit::new(&mut store, seed))?;
        Ok((store, model))
    }

    pub fn sharing(&self) -> WeightSharing {
        self.sharing
    }

    pub fn config(&self) -> &TransducerConfig {
        self.nets[0].config()
    }

    pub fn supports(&self, mode: Mode) -> bool {
        self.nets[0].encoder().supports(mode)
    }

    /// The network that runs in `mode`.
    pub fn net(&self, mode: Mode) -> Result<&Transducer> {
        if !self.supports(mode) {
            return Err(Error::Mode(format!("this model was built without {mode} support")));
        }
        Ok(match self.sharing {
            WeightSharing::Shared => &self.nets[0],
            WeightSharing::Separate => &self.nets[mode.index()],
        })
    }

    /// Distinct networks (one when shared).
    pub fn nets(&self) -> &[Transducer] {
        &self.nets
    }

    pub fn num_params(&self) -> usize {
        self.nets.iter().map(Transducer::num_params).sum()
    }

    pub fn encoder_params(&self) -> usize {
        self.nets.iter().map(|n| n.encoder().num_params()).sum()
    }

    /// Encoder accounting of the shared network (or the streaming one when separate).
    pub fn encoder_accounting(&self, store: &ParamStore) -> ParamAccounting {
        let prefix = match self.sharing {
            WeightSharing::Shared => "encoder.".to_owned(),
            WeightSharing::Separate => "streaming.encoder.".to_owned(),
        };
        self.nets[0].encoder().accounting(store, &prefix)
    }

    pub fn decode(&self, store: &ParamStore, x: &Tensor, mode: Mode) -> Result<Hypothesis> {
        self.net(mode)?.greedy_decode(store, x, mode)
    }

    pub fn lattice(&self, store: &ParamStore, x: &Tensor, y: &[usize], mode: Mode) -> Result<TransducerLattice> {
        self.net(mode)?.lattice(store, x, y, mode)
    }
}
