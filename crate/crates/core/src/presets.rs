//! Named configurations shared by the test suite and the CLI: the
//! reference per-token cache rows, the small loss-gap verification task,
//! and the desk-scale training setups.

use crate::attn::HeadInjection;
use crate::config::{ModelConfig, Positional, VariantKind};
use crate::data::BYTE_VOCAB;
use crate::mesa::TaskSpec;
use crate::train::TrainConfig;

/// 24-layer, 1024-wide, 16-head reference architecture for the per-token
/// cache rows; element width chosen per row family.
fn table3_base(variant: VariantKind, elem_bytes: usize) -> ModelConfig {
    ModelConfig {
        layers: 24,
        dim: 1024,
        heads: 16,
        ffn_dim: 4104,
        vocab: 50257,
        n_max: 1024,
        variant,
        skip_ratio: 0.5,
        injection: HeadInjection::SecondHalf,
        positional: Positional::Learned,
        elem_bytes,
    }
}

/// Grouped-KV rows (4-byte cache elements, groups of two query heads).
pub fn table3_gqa() -> ModelConfig {
    table3_base(VariantKind::Gqa { groups: 8 }, 4)
}

pub fn table3_skipv1_gqa() -> ModelConfig {
    table3_base(VariantKind::SkipV1Gqa { groups: 8 }, 4)
}

/// Latent rows (2-byte cache elements, latent 256 + rotary 32).
pub fn table3_mla() -> ModelConfig {
    table3_base(VariantKind::Mla { d_c: 256, d_r: 32 }, 2)
}

pub fn table3_skipv1_mla() -> ModelConfig {
    table3_base(VariantKind::SkipV1Mla { d_c: 256, d_r: 32 }, 2)
}

/// Plain value-skip / baseline pair used for the per-token slope property.
pub fn slope_pair(layers: usize) -> (ModelConfig, ModelConfig) {
    let mut mha = table3_base(VariantKind::Mha, 2);
    mha.layers = layers;
    let mut skip = table3_base(VariantKind::SkipV1, 2);
    skip.layers = layers;
    (mha, skip)
}

/// Small loss-gap verification task: d=4, copy rank 2, 16 context pairs,
/// noise 0.1, prior mean `3 sqrt(d) I`, 50k evaluation samples.
pub fn theorem_small() -> TaskSpec {
    TaskSpec::with_identity_mean(4, 2, 16, 0.1, 3.0, 50_000, 7)
}

/// Two-layer, 128-wide byte-level model for the training parity run.
pub fn parity_model(variant: VariantKind) -> ModelConfig {
    ModelConfig {
        layers: 2,
        dim: 128,
        heads: 4,
        ffn_dim: 512,
        vocab: BYTE_VOCAB,
        n_max: 64,
        variant,
        skip_ratio: 0.5,
        injection: HeadInjection::SecondHalf,
        positional: Positional::Learned,
        elem_bytes: 2,
    }
}

/// The 2000-step desk-scale training run used for the parity comparison.
pub fn parity_train(variant: VariantKind, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk_defaults(parity_model(variant));
    cfg.steps = 2000;
    cfg.batch = 8;
    cfg.seq_len = 64;
    cfg.seed = seed;
    cfg.val_every = 200;
    cfg.val_windows = 64;
    cfg
}

/// Smaller pilot model used by the conversion comparison.
pub fn pilot_model(variant: VariantKind) -> ModelConfig {
    ModelConfig {
        layers: 2,
        dim: 64,
        heads: 4,
        ffn_dim: 256,
        vocab: BYTE_VOCAB,
        n_max: 64,
        variant,
        skip_ratio: 0.5,
        injection: HeadInjection::SecondHalf,
        positional: Positional::Learned,
        elem_bytes: 2,
    }
}

pub fn pilot_train(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk_defaults(pilot_model(VariantKind::Mha));
    cfg.steps = 2000;
    cfg.batch = 4;
    cfg.seq_len = 64;
    cfg.seed = seed;
    cfg.val_every = 500;
    cfg.val_windows = 48;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [
            table3_gqa(),
            table3_skipv1_gqa(),
            table3_mla(),
            table3_skipv1_mla(),
            parity_model(VariantKind::Mha),
            parity_model(VariantKind::SkipV1),
            pilot_model(VariantKind::Mha),
        ] {
            cfg.validate().unwrap();
        }
        assert!(theorem_small().precondition_ok());
    }
}
