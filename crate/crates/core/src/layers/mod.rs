//! Layers that run in both streaming and full-context mode with shared weights.
//!
//! Every layer takes an explicit [`Mode`]. Pointwise layers ignore it;
//! temporal layers switch between a causal view (output at `t` reads inputs
//! `..=t` only) and a full-context view of the same parameters. Normalization
//! is the one exception that keeps a separate parameter set per mode.

mod attention;
mod conv;
mod norm;
mod pool;
mod se;

pub use attention::DualSelfAttention;
pub use conv::{CausalConv1D, DualConv1D};
pub use norm::{DualNorm, NormKind};
pub use pool::dual_avg_pool;
pub use se::SEBlock;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{ParamId, ParamInit, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Streaming,
    #[serde(rename = "fullcontext")]
    FullContext,
}

impl Mode {
    pub const BOTH: [Mode; 2] = [Mode::Streaming, Mode::FullContext];

    pub fn index(self) -> usize {
        match self {
            Mode::Streaming => 0,
            Mode::FullContext => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Streaming => "streaming",
            Mode::FullContext => "fullcontext",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One forward (and optionally backward) pass: a fresh graph bound to a
/// parameter store.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    training: bool,
    stat_updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, training: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            training,
            stat_updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Graph node for a parameter; trainable parameters require gradients.
    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.store;
        if store.is_trainable(id) {
            self.graph.param(id.index(), || store.get(id).clone())
        } else {
            self.graph.constant(store.get(id).clone())
        }
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub(crate) fn record_stat(&mut self, id: ParamId, value: Tensor) {
        self.stat_updates.push((id, value));
    }

    /// Buffer updates (running statistics) produced during a training pass.
    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.stat_updates)
    }
}

/// Pointwise affine map `x W + b` over the last axis of `[N, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut ParamInit<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        init.scoped(name, |init| {
            let weight = init.uniform("weight", &[in_dim, out_dim], in_dim)?;
            let bias = if bias {
                Some(init.constant("bias", &[out_dim], 0.0)?)
            } else {
                None
            };
            Ok(Self {
                weight,
                bias,
                in_dim,
                out_dim,
            })
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let mut y = s.graph.matmul(x, w)?;
        if let Some(b) = self.bias {
            let b = s.param(b);
            y = s.graph.add(y, b)?;
        }
        Ok(y)
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}
