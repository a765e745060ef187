//! Property tests: container round-trips, softmax column structure, and
//! end-to-end causality across variants.

use proptest::prelude::*;

use skv1_core::attn::HeadInjection;
use skv1_core::ckpt_io::{read_checkpoint, write_checkpoint};
use skv1_core::config::{ModelConfig, Positional, VariantKind};
use skv1_core::model::init_weights;
use skv1_core::tensor::{causal_softmax, Tensor};

fn variant_strategy() -> impl Strategy<Value = VariantKind> {
    prop_oneof![
        Just(VariantKind::Mha),
        Just(VariantKind::SkipV1),
        Just(VariantKind::ResFormer { lambda: 0.5 }),
        Just(VariantKind::Gqa { groups: 2 }),
        Just(VariantKind::SkipV1Gqa { groups: 2 }),
        Just(VariantKind::Mla { d_c: 4, d_r: 2 }),
        Just(VariantKind::SkipV1Mla { d_c: 4, d_r: 2 }),
        Just(VariantKind::YocoV),
        Just(VariantKind::ClaV { period: 2 }),
        Just(VariantKind::SkipKv1),
        Just(VariantKind::SkipV1Yoco),
    ]
}

fn small_config(variant: VariantKind) -> ModelConfig {
    ModelConfig {
        layers: 2,
        dim: 8,
        heads: 2,
        ffn_dim: 12,
        vocab: 17,
        n_max: 10,
        variant,
        skip_ratio: 0.5,
        injection: HeadInjection::SecondHalf,
        positional: Positional::Learned,
        elem_bytes: 2,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(variant in variant_strategy(), seed in 0u64..1000) {
        let ck = init_weights(&small_config(variant), seed).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(&back.config, &ck.config);
        for (name, t) in &ck.tensors {
            let u = &back.tensors[name];
            prop_assert_eq!(t.shape(), u.shape());
            for (a, b) in t.data().iter().zip(u.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn softmax_columns_sum_to_one_and_mask_is_exact(
        n in 1usize..8,
        scale in 0.05f64..4.0,
        raw in proptest::collection::vec(-6.0f64..6.0, 64),
    ) {
        let scores = Tensor::new(vec![n, n], raw[..n * n].to_vec()).unwrap();
        let w = causal_softmax(&scores, scale).unwrap();
        for j in 0..n {
            let mut sum = 0.0;
            for i in 0..n {
                if i > j {
                    prop_assert_eq!(w.at(i, j), 0.0);
                } else {
                    let v = w.at(i, j);
                    prop_assert!((0.0..=1.0).contains(&v));
                    sum += v;
                }
            }
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_causal_for_every_variant(
        variant in variant_strategy(),
        seed in 0u64..100,
        flip_pos in 1usize..6,
    ) {
        let cfg = small_config(variant);
        let ck = init_weights(&cfg, seed).unwrap();
        let tokens: Vec<usize> = (0..6).map(|i| (i * 5 + 1) % 17).collect();
        let base = ck.forward(&tokens).unwrap();
        let mut changed = tokens.clone();
        changed[flip_pos] = (changed[flip_pos] + 3) % 17;
        let out = ck.forward(&changed).unwrap();
        // Positions before the perturbed token are bitwise unchanged.
        for j in 0..flip_pos {
            for i in 0..17 {
                prop_assert_eq!(base.at(i, j).to_bits(), out.at(i, j).to_bits());
            }
        }
    }
}
