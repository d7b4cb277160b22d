//! The two views of one set of weights: a symmetric convolution whose
//! streaming view equals a causal convolution built from its left taps, a
//! self-attention layer that ignores the future in streaming mode, and the
//! parameter overhead of supporting full-context mode.

use std::rc::Rc;

use dualmode::encoder::{build_encoder, encode_utterance, EncoderConfig, EncoderVariant};
use dualmode::layers::{CausalConv1D, DualConv1D, DualSelfAttention, Session};
use dualmode::params::{ParamInit, ParamStore};
use dualmode::tensor::{SeqLayout, Tensor};
use dualmode::Mode;

fn main() -> dualmode::Result<()> {
    let (channels, k) = (3, 5);
    let mut store = ParamStore::new();
    let mut init = ParamInit::new(&mut store, 7);
    let dual = DualConv1D::new(&mut init, "dual", channels, channels, k, channels)?;
    let causal = CausalConv1D::new(&mut init, "causal", channels, channels, k.div_ceil(2), channels)?;
    let attn = DualSelfAttention::new(&mut init, "attn", channels, 1)?;
    let taps = dual.causal_taps(&store);
    store.set(causal.weight(), taps)?;

    let x = Tensor::matrix(8, channels, (0..24).map(|i| (i as f64 * 0.7).sin()).collect())?;
    let layout = Rc::new(SeqLayout::single(8));
    let mut s = Session::new(&store, false);
    let xv = s.input(x);
    let streaming = dual.forward(&mut s, xv, &layout, Mode::Streaming)?;
    let full = dual.forward(&mut s, xv, &layout, Mode::FullContext)?;
    let reference = causal.forward(&mut s, xv, &layout)?;
    println!("kernel {k}, streaming mask {:?}", dual.stream_mask());
    println!(
        "streaming vs causal conv: max |diff| = {:.1e}",
        s.value(streaming).max_abs_diff(s.value(reference))
    );
    println!(
        "streaming vs full-context conv: max |diff| = {:.3}",
        s.value(streaming).max_abs_diff(s.value(full))
    );

    let (_, weights) = attn.forward_with_weights(&mut s, xv, &layout, Mode::Streaming)?;
    println!("streaming attention weights (row = query):");
    let w = s.value(weights[0]);
    for r in 0..w.rows() {
        let row: Vec<String> = w.row(r).iter().map(|v| format!("{v:.2}")).collect();
        println!("  {}", row.join(" "));
    }

    for variant in [EncoderVariant::DualMode, EncoderVariant::StreamingOnly] {
        let cfg = EncoderConfig {
            variant,
            ..EncoderConfig::default()
        };
        let (store, enc) = build_encoder(&cfg, 1)?;
        let acc = enc.accounting(&store, "encoder.");
        println!(
            "{variant:?}: {} parameters, {} norm duplicates, {} full-context conv taps ({:.2}% unshared)",
            acc.total,
            acc.norm_duplicates,
            acc.conv_fullcontext_extra,
            100.0 * acc.unshared_fraction()
        );
        let probe = Tensor::full(vec![10, cfg.feature_dim], 0.5);
        let h = encode_utterance(&enc, &store, &probe, Mode::Streaming)?;
        println!("  streaming output {:?}", h.shape());
    }
    Ok(())
}
