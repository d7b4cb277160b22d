use std::path::Path;

use proptest::prelude::*;

use dualmode::data::{decode_features, encode_features, generate_utterances, PackedBatch, PaddedBatch, SynthTaskConfig};
use dualmode::encoder::EncoderConfig;
use dualmode::eval::{edit_counts, percentile, utterance_latency};
use dualmode::model::{DualModeModel, WeightSharing};
use dualmode::tensor::Tensor;
use dualmode::training::{collapse, kl_divergence, utterance_losses, ModeStrategy, TrainConfig, Trainer};
use dualmode::transducer::{EmissionRecord, Hypothesis, TransducerConfig};
use dualmode::Mode;

fn tiny_model() -> TransducerConfig {
    TransducerConfig {
        encoder: EncoderConfig {
            blocks: 1,
            channels: 8,
            kernel_size: 3,
            ..EncoderConfig::default()
        },
        embed_dim: 4,
        prediction_hidden: 6,
        joint_dim: 6,
        ..TransducerConfig::default()
    }
}

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..10.0, len).prop_map(|w| {
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    })
}

proptest! {
    #[test]
    fn percentile_is_monotone_in_q(values in prop::collection::vec(-500.0f64..500.0, 1..40), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (pl, ph) = (percentile(&values, lo).unwrap(), percentile(&values, hi).unwrap());
        prop_assert!(pl <= ph);
        prop_assert!(values.contains(&pl));
        prop_assert!(percentile(&values, 0.5).unwrap() <= percentile(&values, 0.9).unwrap());
    }

    #[test]
    fn latency_shifts_with_lookahead(
        frames in prop::collection::vec(1usize..40, 1..8),
        stride in 1usize..4,
        eos in 1usize..100,
        lookahead in 0usize..12,
    ) {
        let mut frames = frames;
        frames.sort_unstable();
        let hyp = Hypothesis { tokens: vec![1; frames.len()], frames };
        let base = utterance_latency(&EmissionRecord::new("u", hyp.clone(), stride, 0), eos).unwrap();
        let shifted = utterance_latency(&EmissionRecord::new("u", hyp, stride, lookahead), eos).unwrap();
        prop_assert_eq!(shifted - base, 10.0 * lookahead as f64);
    }

    #[test]
    fn kl_is_non_negative(p in distribution(3), q in distribution(3)) {
        let kl = kl_divergence(&p, &q);
        prop_assert!(kl >= -1e-15);
        prop_assert!(kl_divergence(&p, &p).abs() < 1e-15);
    }

    #[test]
    fn collapse_keeps_mass(node in distribution(5), label in 1usize..5) {
        let logp: Vec<f64> = node.iter().map(|p| p.ln()).collect();
        for parts in [collapse(&logp, Some(label)), collapse(&logp, None)] {
            prop_assert!((parts.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn edit_breakdown_is_consistent(
        hyp in prop::collection::vec(1usize..5, 0..15),
        reference in prop::collection::vec(1usize..5, 0..15),
    ) {
        let e = edit_counts(&hyp, &reference);
        prop_assert_eq!(e.deletions as i64 - e.insertions as i64, reference.len() as i64 - hyp.len() as i64);
        prop_assert!(e.total() <= hyp.len().max(reference.len()));
        prop_assert_eq!(e.total(), edit_counts(&reference, &hyp).total());
        prop_assert_eq!(edit_counts(&reference, &reference).total(), 0);
    }

    #[test]
    fn feature_files_round_trip(rows in 1usize..20, cols in 1usize..10, seed in any::<u32>()) {
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 as f64 / 1e9 - 2.0)
            .map(|v| v as f32 as f64)
            .collect();
        let x = Tensor::new(vec![rows, cols], data).unwrap();
        let bytes = encode_features(&x).unwrap();
        let back = decode_features(&bytes, Path::new("p.dmf")).unwrap();
        prop_assert_eq!(&back, &x);
        prop_assert_eq!(encode_features(&back).unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn padding_does_not_change_losses(seed in 0u64..1000, n in 2usize..5) {
        let task = SynthTaskConfig { seed, ..SynthTaskConfig::default() };
        let utts = generate_utterances(&task, n).unwrap();
        let (store, model) = DualModeModel::init(&tiny_model(), WeightSharing::Shared, seed).unwrap();
        let refs: Vec<_> = utts.iter().collect();
        let padded = PaddedBatch::new(&refs).unwrap().pack();
        for mode in Mode::BOTH {
            let together = utterance_losses(&model, &store, &padded, mode).unwrap();
            for (u, l) in utts.iter().zip(&together) {
                let alone = utterance_losses(&model, &store, &PackedBatch::from_utterances(&[u]).unwrap(), mode).unwrap();
                prop_assert!((alone[0] - l).abs() <= 1e-12, "{} {} vs {}", u.id, alone[0], l);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn streaming_only_objective_matches_sampled_streaming(seed in 0u64..100) {
        let task = SynthTaskConfig { seed, ..SynthTaskConfig::default() };
        let data = generate_utterances(&task, 12).unwrap();
        let joint = TrainConfig {
            steps: 6,
            batch_size: 3,
            w_full: 0.0,
            w_distill: 0.0,
            ..TrainConfig::default()
        };
        let sampled = TrainConfig {
            mode_strategy: ModeStrategy::Sampled,
            streaming_prob: 1.0,
            ..joint.clone()
        };
        let mut a = Trainer::new(&tiny_model(), &joint, seed, &data).unwrap();
        let mut b = Trainer::new(&tiny_model(), &sampled, seed, &data).unwrap();
        for _ in 0..joint.steps {
            a.step().unwrap();
            b.step().unwrap();
            for (ea, eb) in a.store.entries().iter().zip(b.store.entries()) {
                prop_assert!(ea.value.max_abs_diff(&eb.value) <= 1e-12, "{}", ea.name);
            }
        }
    }
}
