use std::rc::Rc;

use super::{Mode, Session};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamInit, ParamStore};
use crate::tensor::{SeqLayout, Tensor, Var};

/// Symmetric "same" convolution of odd width `k` whose streaming view keeps
/// only the left `(k + 1) / 2` taps (self included) via a constant mask.
#[derive(Debug, Clone)]
pub struct DualConv1D {
    weight: ParamId,
    bias: ParamId,
    in_channels: usize,
    out_channels: usize,
    kernel_size: usize,
    groups: usize,
    stream_mask: Vec<bool>,
}

impl DualConv1D {
    /// `groups == in_channels == out_channels` gives a depthwise convolution.
    pub fn new(
        init: &mut ParamInit<'_>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        groups: usize,
    ) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::config("kernel_size", format!("must be odd, got {kernel_size}")));
        }
        check_groups(in_channels, out_channels, groups)?;
        let cpg = in_channels / groups;
        init.scoped(name, |init| {
            let weight = init.uniform("weight", &[out_channels, cpg, kernel_size], cpg * kernel_size)?;
            let bias = init.constant("bias", &[out_channels], 0.0)?;
            Ok(Self {
                weight,
                bias,
                in_channels,
                out_channels,
                kernel_size,
                groups,
                stream_mask: (0..kernel_size).map(|j| j <= kernel_size / 2).collect(),
            })
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, layout: &Rc<SeqLayout>, mode: Mode) -> Result<Var> {
        check_input(s, x, self.in_channels)?;
        let mut w = s.param(self.weight);
        if mode == Mode::Streaming {
            let mask = Tensor::new(
                vec![1, 1, self.kernel_size],
                self.stream_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
            )?;
            let mask = s.input(mask);
            w = s.graph.mul(w, mask)?;
        }
        let y = s
            .graph
            .conv1d(x, w, self.groups, self.kernel_size / 2, Rc::clone(layout))?;
        let b = s.param(self.bias);
        s.graph.add(y, b)
    }

    pub fn stream_mask(&self) -> &[bool] {
        &self.stream_mask
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    /// Number of one-dimensional kernels (one per output/input channel pair in a group).
    pub fn num_kernels(&self) -> usize {
        self.out_channels * self.in_channels / self.groups
    }

    pub fn num_params(&self) -> usize {
        self.num_kernels() * self.kernel_size + self.out_channels
    }

    /// Left `(k + 1) / 2` taps of the kernel: the weights a standalone causal
    /// convolution needs to reproduce the streaming view.
    pub fn causal_taps(&self, store: &ParamStore) -> Tensor {
        let w = store.get(self.weight);
        let (co, cpg, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let m = k / 2 + 1;
        let mut out = Vec::with_capacity(co * cpg * m);
        for kernel in w.data().chunks(k) {
            out.extend_from_slice(&kernel[..m]);
        }
        Tensor::new(vec![co, cpg, m], out).expect("shape")
    }
}

/// Left-aligned causal convolution: output at `t` reads `t - (m-1) ..= t`.
#[derive(Debug, Clone)]
pub struct CausalConv1D {
    weight: ParamId,
    bias: ParamId,
    in_channels: usize,
    out_channels: usize,
    taps: usize,
    groups: usize,
}

impl CausalConv1D {
    pub fn new(
        init: &mut ParamInit<'_>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        taps: usize,
        groups: usize,
    ) -> Result<Self> {
        if taps == 0 {
            return Err(Error::config("kernel_size", "causal convolution needs at least one tap"));
        }
        check_groups(in_channels, out_channels, groups)?;
        let cpg = in_channels / groups;
        init.scoped(name, |init| {
            Ok(Self {
                weight: init.uniform("weight", &[out_channels, cpg, taps], cpg * taps)?,
                bias: init.constant("bias", &[out_channels], 0.0)?,
                in_channels,
                out_channels,
                taps,
                groups,
            })
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, layout: &Rc<SeqLayout>) -> Result<Var> {
        check_input(s, x, self.in_channels)?;
        let w = s.param(self.weight);
        let y = s.graph.conv1d(x, w, self.groups, self.taps - 1, Rc::clone(layout))?;
        let b = s.param(self.bias);
        s.graph.add(y, b)
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn num_kernels(&self) -> usize {
        self.out_channels * self.in_channels / self.groups
    }

    pub fn num_params(&self) -> usize {
        self.num_kernels() * self.taps + self.out_channels
    }
}

fn check_groups(in_channels: usize, out_channels: usize, groups: usize) -> Result<()> {
    if groups == 0 || !in_channels.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
        return Err(Error::config(
            "groups",
            format!("{groups} does not divide channels {in_channels}->{out_channels}"),
        ));
    }
    Ok(())
}

fn check_input(s: &Session<'_>, x: Var, channels: usize) -> Result<()> {
    let shape = s.graph.shape(x);
    if shape.len() != 2 || shape[1] != channels {
        return Err(Error::shape("conv1d", shape, &[shape.first().copied().unwrap_or(0), channels]));
    }
    Ok(())
}
