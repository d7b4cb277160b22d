//! Toy-scale ContextNet-style (convolution + squeeze-and-excitation) and
//! Conformer-style (feed-forward + attention + convolution) encoders built
//! from dual-mode layers.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    CausalConv1D, DualConv1D, DualNorm, DualSelfAttention, Linear, Mode, NormKind, SEBlock, Session,
};
use crate::params::{ParamInit, ParamStore};
use crate::tensor::{SeqLayout, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    ContextnetLite,
    ConformerLite,
}

/// `DualMode` runs in either mode with shared weights. `StreamingOnly` is
/// the plain causal counterpart: `(k + 1) / 2`-tap convolutions and one
/// normalization set per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    #[default]
    DualMode,
    StreamingOnly,
}

fn default_se_reduction() -> usize {
    4
}

fn default_ff_multiplier() -> usize {
    2
}

fn default_norm() -> NormKind {
    NormKind::Layer
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub architecture: Architecture,
    pub blocks: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub heads: usize,
    /// Frames stacked by the input time reduction.
    pub stride: usize,
    pub feature_dim: usize,
    #[serde(default = "default_norm")]
    pub norm: NormKind,
    #[serde(default)]
    pub variant: EncoderVariant,
    #[serde(default = "default_se_reduction")]
    pub se_reduction: usize,
    #[serde(default = "default_ff_multiplier")]
    pub ff_multiplier: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::ContextnetLite,
            blocks: 2,
            channels: 48,
            kernel_size: 5,
            heads: 2,
            stride: 2,
            feature_dim: 8,
            norm: NormKind::Layer,
            variant: EncoderVariant::DualMode,
            se_reduction: 4,
            ff_multiplier: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("blocks", self.blocks),
            ("channels", self.channels),
            ("kernel_size", self.kernel_size),
            ("stride", self.stride),
            ("feature_dim", self.feature_dim),
            ("se_reduction", self.se_reduction),
            ("ff_multiplier", self.ff_multiplier),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config("kernel_size", format!("must be odd, got {}", self.kernel_size)));
        }
        if self.architecture == Architecture::ConformerLite
            && (self.heads == 0 || !self.channels.is_multiple_of(self.heads))
        {
            return Err(Error::config(
                "heads",
                format!("{} heads do not divide {} channels", self.heads, self.channels),
            ));
        }
        Ok(())
    }

    /// `T' = ceil(T / stride)`.
    pub fn output_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.stride)
    }
}

#[derive(Debug, Clone)]
enum TemporalConv {
    Dual(DualConv1D),
    Causal(CausalConv1D),
}

impl TemporalConv {
    fn new(init: &mut ParamInit<'_>, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(match cfg.variant {
            EncoderVariant::DualMode => Self::Dual(DualConv1D::new(init, name, c, c, cfg.kernel_size, c)?),
            EncoderVariant::StreamingOnly => {
                Self::Causal(CausalConv1D::new(init, name, c, c, cfg.kernel_size / 2 + 1, c)?)
            }
        })
    }

    fn forward(&self, s: &mut Session<'_>, x: Var, layout: &Rc<SeqLayout>, mode: Mode) -> Result<Var> {
        match self {
            Self::Dual(c) => c.forward(s, x, layout, mode),
            Self::Causal(c) => c.forward(s, x, layout),
        }
    }

    fn num_params(&self) -> usize {
        match self {
            Self::Dual(c) => c.num_params(),
            Self::Causal(c) => c.num_params(),
        }
    }
}

fn norm(init: &mut ParamInit<'_>, name: &str, cfg: &EncoderConfig) -> Result<DualNorm> {
    match cfg.variant {
        EncoderVariant::DualMode => DualNorm::new(init, name, cfg.norm, cfg.channels),
        EncoderVariant::StreamingOnly => DualNorm::streaming_only(init, name, cfg.norm, cfg.channels),
    }
}

#[derive(Debug, Clone)]
struct ContextNetBlock {
    conv: TemporalConv,
    pointwise: Linear,
    norm: DualNorm,
    se: SEBlock,
}

impl ContextNetBlock {
    fn new(init: &mut ParamInit<'_>, cfg: &EncoderConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            conv: TemporalConv::new(init, "conv", cfg)?,
            pointwise: Linear::new(init, "pointwise", c, c, true)?,
            norm: norm(init, "norm", cfg)?,
            se: SEBlock::new(init, "se", c, (c / cfg.se_reduction).max(1))?,
        })
    }

    fn forward(&self, s: &mut Session<'_>, x: Var, layout: &Rc<SeqLayout>, mode: Mode) -> Result<Var> {
        // depthwise-separable convolution
        let h = self.conv.forward(s, x, layout, mode)?;
        let h = self.pointwise.forward(s, h)?;
        let h = self.norm.forward(s, h, mode)?;
        let h = s.graph.swish(h);
        let h = self.se.forward(s, h, layout, mode)?;
        s.graph.add(x, h)
    }
}

#[derive(Debug, Clone)]
struct ConformerBlock {
    ff_norm: DualNorm,
    ff_in: Linear,
    ff_out: Linear,
    attn_norm: DualNorm,
    attn: DualSelfAttention,
    conv_norm: DualNorm,
    conv_in: Linear,
    conv: TemporalConv,
    depthwise_norm: DualNorm,
    conv_out: Linear,
    out_norm: DualNorm,
}

impl ConformerBlock {
    fn new(init: &mut ParamInit<'_>, cfg: &EncoderConfig) -> Result<Self> {
        let c = cfg.channels;
        let hidden = c * cfg.ff_multiplier;
        Ok(Self {
            ff_norm: norm(init, "ff_norm", cfg)?,
            ff_in: Linear::new(init, "ff_in", c, hidden, true)?,
            ff_out: Linear::new(init, "ff_out", hidden, c, true)?,
            attn_norm: norm(init, "attn_norm", cfg)?,
            attn: DualSelfAttention::new(init, "attn", c, cfg.heads)?,
            conv_norm: norm(init, "conv_norm", cfg)?,
            conv_in: Linear::new(init, "conv_in", c, c, true)?,
            conv: TemporalConv::new(init, "conv", cfg)?,
            depthwise_norm: norm(init, "depthwise_norm", cfg)?,
            conv_out: Linear::new(init, "conv_out", c, c, true)?,
            out_norm: norm(init, "out_norm", cfg)?,
        })
    }

    fn forward(&self, s: &mut Session<'_>, x: Var, layout: &Rc<SeqLayout>, mode: Mode) -> Result<Var> {
        let h = self.ff_norm.forward(s, x, mode)?;
        let h = self.ff_in.forward(s, h)?;
        let h = s.graph.swish(h);
        let h = self.ff_out.forward(s, h)?;
        let h = s.graph.scale(h, 0.5);
        let x = s.graph.add(x, h)?;

        let h = self.attn_norm.forward(s, x, mode)?;
        let h = self.attn.forward(s, h, layout, mode)?;
        let x = s.graph.add(x, h)?;

        let h = self.conv_norm.forward(s, x, mode)?;
        let h = self.conv_in.forward(s, h)?;
        let h = s.graph.swish(h);
        let h = self.conv.forward(s, h, layout, mode)?;
        let h = self.depthwise_norm.forward(s, h, mode)?;
        let h = s.graph.swish(h);
        let h = self.conv_out.forward(s, h)?;
        let x = s.graph.add(x, h)?;

        self.out_norm.forward(s, x, mode)
    }
}

#[derive(Debug, Clone)]
enum Block {
    ContextNet(ContextNetBlock),
    Conformer(ConformerBlock),
}

/// Encoder hidden states for a packed batch.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[Σ T'_i, channels]`.
    pub hidden: Var,
    /// Reduced lengths `T'_i`.
    pub layout: Rc<SeqLayout>,
    pub mode: Mode,
}

/// Trainable-parameter breakdown of an encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamAccounting {
    pub total: usize,
    /// γ/β scalars held once per additional mode.
    pub norm_duplicates: usize,
    /// Taps beyond the causal `(k + 1) / 2` in every temporal kernel.
    pub conv_fullcontext_extra: usize,
    /// `(number of 1-D kernels, kernel size)` per temporal convolution.
    pub conv_kernels: Vec<(usize, usize)>,
}

impl ParamAccounting {
    /// Fraction of parameters that are not shared between the modes or only
    /// serve full-context mode.
    pub fn unshared_fraction(&self) -> f64 {
        (self.norm_duplicates + self.conv_fullcontext_extra) as f64 / self.total as f64
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    input_proj: Linear,
    blocks: Vec<Block>,
}

impl Encoder {
    pub fn build(cfg: &EncoderConfig, init: &mut ParamInit<'_>) -> Result<Self> {
        cfg.validate()?;
        init.scoped("encoder", |init| {
            let input_proj =
                Linear::new(init, "input_proj", cfg.feature_dim * cfg.stride, cfg.channels, true)?;
            let mut blocks = Vec::with_capacity(cfg.blocks);
            for b in 0..cfg.blocks {
                blocks.push(init.scoped(&format!("block{b}"), |init| {
                    Ok(match cfg.architecture {
                        Architecture::ContextnetLite => Block::ContextNet(ContextNetBlock::new(init, cfg)?),
                        Architecture::ConformerLite => Block::Conformer(ConformerBlock::new(init, cfg)?),
                    })
                })?);
            }
            Ok(Self {
                cfg: cfg.clone(),
                input_proj,
                blocks,
            })
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn supports(&self, mode: Mode) -> bool {
        mode == Mode::Streaming || self.cfg.variant == EncoderVariant::DualMode
    }

    /// Encodes a packed batch `x: [Σ T_i, feature_dim]` with source lengths `layout`.
    pub fn encode(&self, s: &mut Session<'_>, x: Var, layout: &SeqLayout, mode: Mode) -> Result<EncoderOutput> {
        if !self.supports(mode) {
            return Err(Error::Mode(format!("a streaming-only encoder cannot run in {mode} mode")));
        }
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.feature_dim {
            return Err(Error::shape("encode", &shape, &[layout.total(), self.cfg.feature_dim]));
        }
        if shape[0] != layout.total() {
            return Err(Error::shape("encode", &shape, &[layout.total(), self.cfg.feature_dim]));
        }
        if layout.lens().contains(&0) {
            return Err(Error::arg("encode", "every utterance needs at least one frame"));
        }
        let (stacked, reduced) = self.reduce_time(s, x, layout)?;
        let mut h = self.input_proj.forward(s, stacked)?;
        if self.cfg.architecture == Architecture::ConformerLite {
            let pe = s.input(sinusoidal_positions(&reduced, self.cfg.channels));
            h = s.graph.add(h, pe)?;
        }
        for block in &self.blocks {
            h = match block {
                Block::ContextNet(b) => b.forward(s, h, &reduced, mode)?,
                Block::Conformer(b) => b.forward(s, h, &reduced, mode)?,
            };
        }
        Ok(EncoderOutput {
            hidden: h,
            layout: reduced,
            mode,
        })
    }

    /// Stacks `stride` consecutive frames into one, zero-padding the tail of
    /// each utterance. Reduced frame `t'` (1-based) covers source frames
    /// `(t' - 1) * stride + 1 ..= t' * stride`.
    fn reduce_time(&self, s: &mut Session<'_>, x: Var, layout: &SeqLayout) -> Result<(Var, Rc<SeqLayout>)> {
        let (stride, d) = (self.cfg.stride, self.cfg.feature_dim);
        let reduced = Rc::new(SeqLayout::from_lens(
            layout.lens().iter().map(|&l| self.cfg.output_len(l)).collect(),
        ));
        if stride == 1 {
            return Ok((x, reduced));
        }
        let mut parts = Vec::with_capacity(layout.num_segments());
        for ((start, len), &out_len) in layout.segments().zip(reduced.lens()) {
            let mut seg = s.graph.slice(x, 0, start, start + len)?;
            let pad = out_len * stride - len;
            if pad > 0 {
                let zeros = s.input(Tensor::zeros(vec![pad, d]));
                seg = s.graph.concat(&[seg, zeros], 0)?;
            }
            parts.push(s.graph.reshape(seg, &[out_len, stride * d])?);
        }
        let stacked = if parts.len() == 1 {
            parts[0]
        } else {
            s.graph.concat(&parts, 0)?
        };
        Ok((stacked, reduced))
    }

    pub fn accounting(&self, store: &ParamStore, prefix: &str) -> ParamAccounting {
        let mut norm_duplicates = 0;
        let mut conv_kernels = Vec::new();
        let mut visit_norm = |n: &DualNorm| norm_duplicates += (n.num_modes() - 1) * n.params_per_mode();
        let mut visit_conv = |c: &TemporalConv| {
            if let TemporalConv::Dual(c) = c {
                conv_kernels.push((c.num_kernels(), c.kernel_size()));
            }
        };
        for block in &self.blocks {
            match block {
                Block::ContextNet(b) => {
                    visit_conv(&b.conv);
                    visit_norm(&b.norm);
                }
                Block::Conformer(b) => {
                    visit_conv(&b.conv);
                    for n in [&b.ff_norm, &b.attn_norm, &b.conv_norm, &b.depthwise_norm, &b.out_norm] {
                        visit_norm(n);
                    }
                }
            }
        }
        let conv_fullcontext_extra = conv_kernels.iter().map(|&(n, k)| n * (k - 1) / 2).sum();
        ParamAccounting {
            total: store.num_trainable_with_prefix(prefix),
            norm_duplicates,
            conv_fullcontext_extra,
            conv_kernels,
        }
    }

    /// Trainable scalars counted layer by layer (independent of the store).
    pub fn num_params(&self) -> usize {
        let mut total = self.input_proj.num_params();
        for block in &self.blocks {
            total += match block {
                Block::ContextNet(b) => {
                    b.conv.num_params() + b.pointwise.num_params() + b.norm.num_params() + b.se.num_params()
                }
                Block::Conformer(b) => {
                    b.ff_norm.num_params()
                        + b.ff_in.num_params()
                        + b.ff_out.num_params()
                        + b.attn_norm.num_params()
                        + b.attn.num_params()
                        + b.conv_norm.num_params()
                        + b.conv_in.num_params()
                        + b.conv.num_params()
                        + b.depthwise_norm.num_params()
                        + b.conv_out.num_params()
                        + b.out_norm.num_params()
                }
            };
        }
        total
    }
}

/// Builds an encoder in a fresh store from `seed`.
pub fn build_encoder(cfg: &EncoderConfig, seed: u64) -> Result<(ParamStore, Encoder)> {
    let mut store = ParamStore::new();
    let enc = Encoder::build(cfg, &mut ParamInit::new(&mut store, seed))?;
    Ok((store, enc))
}

/// Fixed sinusoidal position table for every reduced frame, restarting per utterance.
fn sinusoidal_positions(layout: &SeqLayout, channels: usize) -> Tensor {
    let mut data = Vec::with_capacity(layout.total() * channels);
    for (_, pos) in layout.positions() {
        for c in 0..channels {
            let rate = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / channels as f64);
            let angle = pos as f64 * rate;
            data.push(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(layout.total(), channels, data).expect("shape")
}

/// Convenience: encode one utterance `[T, D]` outside training.
pub fn encode_utterance(enc: &Encoder, store: &ParamStore, x: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut s = Session::new(store, false);
    let xv = s.input(x.clone());
    let out = enc.encode(&mut s, xv, &SeqLayout::single(x.rows()), mode)?;
    Ok(s.value(out.hidden).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contextnet(blocks: usize, channels: usize, k: usize) -> EncoderConfig {
        EncoderConfig {
            architecture: Architecture::ContextnetLite,
            blocks,
            channels,
            kernel_size: k,
            heads: 1,
            stride: 2,
            feature_dim: 8,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn contextnet_param_count_closed_form() {
        let cfg = contextnet(2, 16, 5);
        let (store, enc) = build_encoder(&cfg, 1).unwrap();
        let (c, k, d, s) = (16, 5, 8, 2);
        let r = c / 4;
        let input = s * d * c + c;
        let conv = c * k + c;
        let norm = 2 * (2 * c);
        let pointwise = c * c + c;
        let se = (c * r + r) + (r * c + c);
        let expected = input + 2 * (conv + norm + pointwise + se);
        assert_eq!(store.num_trainable(), expected);
        assert_eq!(enc.num_params(), expected);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = contextnet(2, 16, 5);
        let (a, _) = build_encoder(&cfg, 11).unwrap();
        let (b, _) = build_encoder(&cfg, 11).unwrap();
        let (c, _) = build_encoder(&cfg, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_fields_are_named() {
        let mut cfg = contextnet(2, 16, 4);
        let err = build_encoder(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("kernel_size"), "{err}");
        cfg.kernel_size = 5;
        cfg.stride = 0;
        assert!(build_encoder(&cfg, 0).unwrap_err().to_string().contains("stride"));
        let cfg = EncoderConfig {
            architecture: Architecture::ConformerLite,
            channels: 10,
            heads: 3,
            ..EncoderConfig::default()
        };
        assert!(build_encoder(&cfg, 0).unwrap_err().to_string().contains("heads"));
    }

    #[test]
    fn stride_length_arithmetic() {
        let cfg = contextnet(1, 8, 3);
        let (store, enc) = build_encoder(&cfg, 0).unwrap();
        let x = Tensor::full(vec![2, 8], 0.3);
        assert_eq!(encode_utterance(&enc, &store, &x, Mode::Streaming).unwrap().rows(), 1);
        let x = Tensor::full(vec![5, 8], 0.3);
        assert_eq!(encode_utterance(&enc, &store, &x, Mode::Streaming).unwrap().rows(), 3);
    }

    #[test]
    fn feature_dim_mismatch() {
        let (store, enc) = build_encoder(&contextnet(1, 8, 3), 0).unwrap();
        assert!(encode_utterance(&enc, &store, &Tensor::zeros(vec![4, 7]), Mode::Streaming).is_err());
    }

    #[test]
    fn modes_differ_on_random_input() {
        for arch in [Architecture::ContextnetLite, Architecture::ConformerLite] {
            let cfg = EncoderConfig {
                architecture: arch,
                ..EncoderConfig::default()
            };
            let (store, enc) = build_encoder(&cfg, 5).unwrap();
            let x = Tensor::matrix(10, 8, (0..80).map(|i| ((i * 7919) % 13) as f64 / 6.0 - 1.0).collect())
                .unwrap();
            let a = encode_utterance(&enc, &store, &x, Mode::Streaming).unwrap();
            let b = encode_utterance(&enc, &store, &x, Mode::FullContext).unwrap();
            assert!(a.max_abs_diff(&b) > 0.0);
        }
    }

    #[test]
    fn streaming_only_rejects_fullcontext() {
        let cfg = EncoderConfig {
            variant: EncoderVariant::StreamingOnly,
            ..EncoderConfig::default()
        };
        let (store, enc) = build_encoder(&cfg, 0).unwrap();
        let x = Tensor::zeros(vec![4, 8]);
        assert!(encode_utterance(&enc, &store, &x, Mode::Streaming).is_ok());
        assert!(matches!(
            encode_utterance(&enc, &store, &x, Mode::FullContext),
            Err(Error::Mode(_))
        ));
    }

    #[test]
    fn default_contextnet_mostly_shared() {
        let (store, enc) = build_encoder(&EncoderConfig::default(), 0).unwrap();
        let acc = enc.accounting(&store, "encoder.");
        assert!(acc.unshared_fraction() < 0.05, "{acc:?} {}", acc.unshared_fraction());
    }
}
