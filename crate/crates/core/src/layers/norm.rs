use serde::{Deserialize, Serialize};

use super::{Mode, Session};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamInit};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Normalize each frame over channels.
    Layer,
    /// Normalize each channel over all frames of the batch; running
    /// statistics are used outside training.
    Batch,
}

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
struct NormParams {
    gamma: ParamId,
    beta: ParamId,
    running_mean: Option<ParamId>,
    running_var: Option<ParamId>,
}

/// Normalization with one independent parameter set per mode.
///
/// A streaming-only model builds the same layer with a single set; asking it
/// for full-context mode is an error.
#[derive(Debug, Clone)]
pub struct DualNorm {
    kind: NormKind,
    channels: usize,
    sets: Vec<NormParams>,
}

impl DualNorm {
    pub fn new(init: &mut ParamInit<'_>, name: &str, kind: NormKind, channels: usize) -> Result<Self> {
        Self::with_modes(init, name, kind, channels, &Mode::BOTH)
    }

    /// Single parameter set used only in streaming mode.
    pub fn streaming_only(init: &mut ParamInit<'_>, name: &str, kind: NormKind, channels: usize) -> Result<Self> {
        Self::with_modes(init, name, kind, channels, &[Mode::Streaming])
    }

    fn with_modes(
        init: &mut ParamInit<'_>,
        name: &str,
        kind: NormKind,
        channels: usize,
        modes: &[Mode],
    ) -> Result<Self> {
        init.scoped(name, |init| {
            let mut sets = Vec::with_capacity(modes.len());
            for mode in modes {
                let set = init.scoped(mode.as_str(), |init| {
                    let gamma = init.constant("gamma", &[channels], 1.0)?;
                    let beta = init.constant("beta", &[channels], 0.0)?;
                    let (running_mean, running_var) = match kind {
                        NormKind::Layer => (None, None),
                        NormKind::Batch => (
                            Some(init.buffer("running_mean", Tensor::zeros(vec![1, channels]))?),
                            Some(init.buffer("running_var", Tensor::full(vec![1, channels], 1.0))?),
                        ),
                    };
                    Ok(NormParams {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    })
                })?;
                sets.push(set);
            }
            Ok(Self { kind, channels, sets })
        })
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn num_modes(&self) -> usize {
        self.sets.len()
    }

    /// Trainable scalars per mode (γ and β).
    pub fn params_per_mode(&self) -> usize {
        2 * self.channels
    }

    pub fn num_params(&self) -> usize {
        self.sets.len() * self.params_per_mode()
    }

    /// `(gamma, beta, running_mean, running_var)` of one mode.
    pub fn mode_params(&self, mode: Mode) -> Result<(ParamId, ParamId, Option<ParamId>, Option<ParamId>)> {
        let p = self.set(mode)?;
        Ok((p.gamma, p.beta, p.running_mean, p.running_var))
    }

    fn set(&self, mode: Mode) -> Result<&NormParams> {
        self.sets
            .get(mode.index())
            .ok_or_else(|| Error::Mode(format!("normalization layer has no {mode} parameters")))
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, mode: Mode) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.channels {
            return Err(Error::shape("norm", &shape, &[self.channels]));
        }
        let p = self.set(mode)?.clone();
        let normed = match self.kind {
            NormKind::Layer => {
                let mean = s.graph.mean_axis(x, 1)?;
                let centered = s.graph.sub(x, mean)?;
                let sq = s.graph.mul(centered, centered)?;
                let var = s.graph.mean_axis(sq, 1)?;
                let var = s.graph.add_scalar(var, EPS);
                let inv = s.graph.powf(var, -0.5);
                s.graph.mul(centered, inv)?
            }
            NormKind::Batch if s.training() => {
                let mean = s.graph.mean_axis(x, 0)?;
                let centered = s.graph.sub(x, mean)?;
                let sq = s.graph.mul(centered, centered)?;
                let var = s.graph.mean_axis(sq, 0)?;
                let (rm, rv) = (p.running_mean.expect("batch norm"), p.running_var.expect("batch norm"));
                let blend = |old: &Tensor, new: &Tensor| {
                    Tensor::new(
                        old.shape().to_vec(),
                        old.data()
                            .iter()
                            .zip(new.data())
                            .map(|(o, n)| (1.0 - MOMENTUM) * o + MOMENTUM * n)
                            .collect(),
                    )
                };
                let store = s.store();
                let new_mean = blend(store.get(rm), s.value(mean))?;
                let new_var = blend(store.get(rv), s.value(var))?;
                s.record_stat(rm, new_mean);
                s.record_stat(rv, new_var);
                let var = s.graph.add_scalar(var, EPS);
                let inv = s.graph.powf(var, -0.5);
                s.graph.mul(centered, inv)?
            }
            NormKind::Batch => {
                let store = s.store();
                let rm = store.get(p.running_mean.expect("batch norm")).clone();
                let inv = store.get(p.running_var.expect("batch norm")).map(|v| 1.0 / (v + EPS).sqrt());
                let rm = s.input(rm);
                let inv = s.input(inv);
                let centered = s.graph.sub(x, rm)?;
                s.graph.mul(centered, inv)?
            }
        };
        let gamma = s.param(p.gamma);
        let beta = s.param(p.beta);
        let scaled = s.graph.mul(normed, gamma)?;
        s.graph.add(scaled, beta)
    }
}
