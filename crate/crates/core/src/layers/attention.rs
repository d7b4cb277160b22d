use std::rc::Rc;

use super::{Linear, Mode, Session};
use crate::error::{Error, Result};
use crate::params::ParamInit;
use crate::tensor::{SeqLayout, Var};

/// Multi-head scaled dot-product self-attention. The projections are the
/// same in both modes; streaming mode restricts each query's softmax to keys
/// at or before it.
#[derive(Debug, Clone)]
pub struct DualSelfAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    heads: usize,
    head_dim: usize,
}

impl DualSelfAttention {
    pub fn new(init: &mut ParamInit<'_>, name: &str, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::config("heads", format!("{heads} heads do not divide {channels} channels")));
        }
        init.scoped(name, |init| {
            Ok(Self {
                query: Linear::new(init, "query", channels, channels, true)?,
                key: Linear::new(init, "key", channels, channels, true)?,
                value: Linear::new(init, "value", channels, channels, true)?,
                output: Linear::new(init, "output", channels, channels, true)?,
                heads,
                head_dim: channels / heads,
            })
        })
    }

    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn projections(&self) -> [&Linear; 4] {
        [&self.query, &self.key, &self.value, &self.output]
    }

    pub fn num_params(&self) -> usize {
        self.projections().iter().map(|l| l.num_params()).sum()
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, layout: &Rc<SeqLayout>, mode: Mode) -> Result<Var> {
        self.attend(s, x, layout, mode, None)
    }

    /// Like [`forward`](Self::forward), also returning the softmax weight
    /// matrices, ordered by segment then head.
    pub fn forward_with_weights(
        &self,
        s: &mut Session<'_>,
        x: Var,
        layout: &Rc<SeqLayout>,
        mode: Mode,
    ) -> Result<(Var, Vec<Var>)> {
        let mut weights = Vec::new();
        let y = self.attend(s, x, layout, mode, Some(&mut weights))?;
        Ok((y, weights))
    }

    fn attend(
        &self,
        s: &mut Session<'_>,
        x: Var,
        layout: &Rc<SeqLayout>,
        mode: Mode,
        mut keep: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let c = self.channels();
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != c {
            return Err(Error::shape("attention", &shape, &[shape.first().copied().unwrap_or(0), c]));
        }
        let q = self.query.forward(s, x)?;
        let k = self.key.forward(s, x)?;
        let v = self.value.forward(s, x)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();

        let mut segments = Vec::with_capacity(layout.num_segments());
        for (start, len) in layout.segments() {
            let qs = s.graph.slice(q, 0, start, start + len)?;
            let ks = s.graph.slice(k, 0, start, start + len)?;
            let vs = s.graph.slice(v, 0, start, start + len)?;
            let mask: Option<Vec<bool>> = match mode {
                Mode::FullContext => None,
                Mode::Streaming => Some(
                    (0..len * len).map(|i| i % len <= i / len).collect(),
                ),
            };
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let (lo, hi) = (h * self.head_dim, (h + 1) * self.head_dim);
                let qh = s.graph.slice(qs, 1, lo, hi)?;
                let kh = s.graph.slice(ks, 1, lo, hi)?;
                let vh = s.graph.slice(vs, 1, lo, hi)?;
                let kt = s.graph.transpose(kh)?;
                let scores = s.graph.matmul(qh, kt)?;
                let scores = s.graph.scale(scores, scale);
                let weights = s.graph.softmax(scores, mask.as_deref())?;
                if let Some(keep) = keep.as_deref_mut() {
                    keep.push(weights);
                }
                heads.push(s.graph.matmul(weights, vh)?);
            }
            segments.push(if heads.len() == 1 {
                heads[0]
            } else {
                s.graph.concat(&heads, 1)?
            });
        }
        let attended = if segments.len() == 1 {
            segments[0]
        } else {
            s.graph.concat(&segments, 0)?
        };
        self.output.forward(s, attended)
    }
}
