//! Architecture description and exact parameter accounting.

use thiserror::Error;

use crate::attn::HeadInjection;

/// Attention variant selector, including the value-skip compositions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VariantKind {
    Mha,
    SkipV1,
    ResFormer { lambda: f64 },
    Gqa { groups: usize },
    SkipV1Gqa { groups: usize },
    Mla { d_c: usize, d_r: usize },
    SkipV1Mla { d_c: usize, d_r: usize },
    YocoV,
    ClaV { period: usize },
    SkipKv1,
    SkipV1Yoco,
}

impl VariantKind {
    pub fn name(&self) -> &'static str {
        match self {
            VariantKind::Mha => "mha",
            VariantKind::SkipV1 => "skipv1",
            VariantKind::ResFormer { .. } => "resformer",
            VariantKind::Gqa { .. } => "gqa",
            VariantKind::SkipV1Gqa { .. } => "skipv1-gqa",
            VariantKind::Mla { .. } => "mla",
            VariantKind::SkipV1Mla { .. } => "skipv1-mla",
            VariantKind::YocoV => "yoco-v",
            VariantKind::ClaV { .. } => "cla-v",
            VariantKind::SkipKv1 => "skipkv1",
            VariantKind::SkipV1Yoco => "skipv1-yoco",
        }
    }

    /// The non-skip variant this one reduces to when the skip is removed.
    pub fn base(&self) -> VariantKind {
        match *self {
            VariantKind::SkipV1 => VariantKind::Mha,
            VariantKind::ResFormer { .. } => VariantKind::Mha,
            VariantKind::SkipV1Gqa { groups } => VariantKind::Gqa { groups },
            VariantKind::SkipV1Mla { d_c, d_r } => VariantKind::Mla { d_c, d_r },
            other => other,
        }
    }

    /// Does the forward pass consume the layer-1 value bank?
    pub fn uses_v1_bank(&self) -> bool {
        matches!(
            self,
            VariantKind::SkipV1
                | VariantKind::ResFormer { .. }
                | VariantKind::SkipV1Gqa { .. }
                | VariantKind::SkipKv1
                | VariantKind::SkipV1Yoco
        )
    }

    pub fn is_mla(&self) -> bool {
        matches!(self, VariantKind::Mla { .. } | VariantKind::SkipV1Mla { .. })
    }
}

/// Positional encoding scheme for the head-structured stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positional {
    Learned,
    Rotary,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Full architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Layer count L.
    pub layers: usize,
    /// Embedding dimension d.
    pub dim: usize,
    /// Head count H.
    pub heads: usize,
    /// FFN hidden dimension r.
    pub ffn_dim: usize,
    /// Vocabulary size V.
    pub vocab: usize,
    /// Maximum sequence length.
    pub n_max: usize,
    pub variant: VariantKind,
    /// Fraction of heads whose values come from layer 1 (skip variants).
    pub skip_ratio: f64,
    pub injection: HeadInjection,
    pub positional: Positional,
    /// Cache element width in bytes, used by the byte accounting.
    pub elem_bytes: usize,
}

impl ModelConfig {
    /// Per-head dimension d_H.
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Locally computed value heads for skip layers: `round((1 - ratio) * H)`.
    pub fn local_heads(&self) -> usize {
        crate::attn::local_heads(self.heads, self.skip_ratio)
    }

    /// Locally computed value groups for the grouped skip composition.
    pub fn local_groups(&self, groups: usize) -> usize {
        crate::attn::local_heads(groups, self.skip_ratio)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::Invalid(m));
        if self.layers == 0 {
            return err("layer count must be >= 1".into());
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return err(format!(
                "embedding dim {} must be a positive multiple of head count {}",
                self.dim, self.heads
            ));
        }
        if self.vocab == 0 || self.n_max == 0 || self.ffn_dim == 0 {
            return err("vocab, n_max and ffn dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.skip_ratio) {
            return err(format!("skip ratio {} outside [0, 1)", self.skip_ratio));
        }
        if self.skip_ratio == 0.5 && self.heads % 2 != 0 {
            return err("a 0.5 skip ratio requires an even head count".into());
        }
        if self.local_heads() == 0 {
            return err("skip ratio leaves no local heads".into());
        }
        if self.injection != HeadInjection::SecondHalf
            && !matches!(self.variant, VariantKind::SkipV1)
        {
            return err("alternative head injection applies to the plain value-skip variant only".into());
        }
        if self.elem_bytes == 0 {
            return err("cache element width must be positive".into());
        }
        match self.variant {
            VariantKind::Gqa { groups } | VariantKind::SkipV1Gqa { groups } => {
                if groups == 0 || self.heads % groups != 0 {
                    return err(format!(
                        "GQA group count {groups} must divide head count {}",
                        self.heads
                    ));
                }
                if matches!(self.variant, VariantKind::SkipV1Gqa { .. })
                    && self.local_groups(groups) == 0
                {
                    return err("skip ratio leaves no local groups".into());
                }
            }
            VariantKind::Mla { d_c, d_r } | VariantKind::SkipV1Mla { d_c, d_r } => {
                if d_c == 0 || d_c >= self.dim {
                    return err(format!("latent dim {d_c} must satisfy 0 < d_c < d"));
                }
                if d_r % 2 != 0 {
                    return err(format!("rotary key dim {d_r} must be even"));
                }
                if matches!(self.variant, VariantKind::SkipV1Mla { .. }) && d_c % 2 != 0 {
                    return err(format!("latent skip requires an even latent dim, got {d_c}"));
                }
            }
            VariantKind::ClaV { period } => {
                if period < 2 {
                    return err(format!("value-sharing period {period} must be >= 2"));
                }
            }
            VariantKind::YocoV | VariantKind::SkipV1Yoco => {
                if self.layers % 2 != 0 {
                    return err("middle-layer key/value reuse requires an even layer count".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Whether a CLA-style layer computes its own values (vs. reusing the
    /// previous computing layer's).
    pub fn cla_computes(&self, layer: usize, period: usize) -> bool {
        (layer - 1) % period == 0
    }
}

/// Exact integer parameter counts (biases excluded, tied embedding counted
/// once, learned positions counted when configured).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub embedding: u64,
    pub positional: u64,
    pub attention: u64,
    pub ffn: u64,
    pub norm: u64,
    pub total: u64,
    /// Value-projection scalars summed over all layers.
    pub w_v: u64,
    /// `total(base MHA config) - total(self)`.
    pub delta_vs_mha: i64,
}

/// Value-projection rows for a given layer (1-based) under a variant.
fn wv_rows(cfg: &ModelConfig, layer: usize) -> usize {
    let d = cfg.dim;
    let d_h = cfg.head_dim();
    match cfg.variant {
        VariantKind::Mha | VariantKind::ResFormer { .. } => d,
        VariantKind::SkipV1 => {
            if layer == 1 {
                d
            } else {
                cfg.local_heads() * d_h
            }
        }
        VariantKind::Gqa { groups } => groups * d_h,
        VariantKind::SkipV1Gqa { groups } => {
            if layer == 1 {
                groups * d_h
            } else {
                cfg.local_groups(groups) * d_h
            }
        }
        VariantKind::Mla { .. } | VariantKind::SkipV1Mla { .. } => 0,
        VariantKind::YocoV => {
            if layer <= cfg.layers / 2 {
                d
            } else {
                0
            }
        }
        VariantKind::ClaV { period } => {
            if cfg.cla_computes(layer, period) {
                d
            } else {
                0
            }
        }
        VariantKind::SkipKv1 => {
            if layer == 1 {
                d
            } else {
                0
            }
        }
        VariantKind::SkipV1Yoco => {
            if layer == 1 {
                d
            } else {
                cfg.local_heads() * d_h
            }
        }
    }
}

/// Key-projection rows for a given layer (1-based) under a variant.
fn wk_rows(cfg: &ModelConfig, layer: usize) -> usize {
    let d = cfg.dim;
    let d_h = cfg.head_dim();
    match cfg.variant {
        VariantKind::Gqa { groups } | VariantKind::SkipV1Gqa { groups } => groups * d_h,
        VariantKind::Mla { .. } | VariantKind::SkipV1Mla { .. } => 0,
        VariantKind::SkipKv1 => {
            if layer == 1 {
                d
            } else {
                0
            }
        }
        VariantKind::SkipV1Yoco => {
            if layer <= cfg.layers / 2 {
                d
            } else {
                0
            }
        }
        _ => d,
    }
}

/// Down-projected latent rows cached/computed by a given layer.
pub(crate) fn mla_latent_rows(cfg: &ModelConfig, layer: usize) -> usize {
    match cfg.variant {
        VariantKind::Mla { d_c, .. } => d_c,
        VariantKind::SkipV1Mla { d_c, .. } => {
            if layer == 1 {
                d_c
            } else {
                d_c / 2
            }
        }
        _ => 0,
    }
}

/// Exact parameter accounting under the documented convention.
pub fn param_count(cfg: &ModelConfig) -> ParamBreakdown {
    let d = cfg.dim as u64;
    let embedding = cfg.vocab as u64 * d;
    let positional = match cfg.positional {
        Positional::Learned => cfg.n_max as u64 * d,
        Positional::Rotary => 0,
    };
    let mut attention: u64 = 0;
    let mut w_v: u64 = 0;
    for layer in 1..=cfg.layers {
        match cfg.variant {
            VariantKind::Mla { d_c, d_r } | VariantKind::SkipV1Mla { d_c, d_r } => {
                let latent = mla_latent_rows(cfg, layer) as u64;
                // W_Q, W_O full; W_DKV (latent x d); W_UK, W_UV (d x d_c);
                // decoupled rotary projections for queries and keys.
                attention += d * d * 2;
                attention += latent * d;
                attention += 2 * d * d_c as u64;
                attention += 2 * d_r as u64 * d;
                w_v += latent * d + d * d_c as u64;
            }
            _ => {
                let wk = wk_rows(cfg, layer) as u64 * d;
                let wv = wv_rows(cfg, layer) as u64 * d;
                attention += d * d // W_Q
                    + wk
                    + wv
                    + d * d; // W_O
                w_v += wv;
            }
        }
    }
    let ffn = 2 * cfg.ffn_dim as u64 * d * cfg.layers as u64;
    // Two layer norms per block plus the final norm, gain and bias each.
    let norm = (2 * cfg.layers as u64 + 1) * 2 * d;
    let total = embedding + positional + attention + ffn + norm;

    let delta_vs_mha = if cfg.variant == VariantKind::Mha {
        0
    } else {
        let mha = ModelConfig { variant: VariantKind::Mha, ..cfg.clone() };
        param_count(&mha).total as i64 - total as i64
    };

    ParamBreakdown {
        embedding,
        positional,
        attention,
        ffn,
        norm,
        total,
        w_v,
        delta_vs_mha,
    }
}
