//! L-layer decoder-only language model: weight schema, initialization, and
//! the forward pass that wires every attention variant together with the
//! layer-1 value bank.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attn::{
    self, cross_kv_on_tape, gqa_on_tape, mha_on_tape, mla_on_tape, select_skip_heads,
    skip_heads_on_tape, AttnVars, HeadMap, HeadSource, MlaVars,
};
use crate::config::{mla_latent_rows, ConfigError, ModelConfig, Positional, VariantKind};
use crate::tape::{Tape, Var};
use crate::tensor::{NumericError, Scalar, Tensor};

/// Layer-norm stabilizer used throughout the stack.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("sequence length {n} exceeds maximum {n_max}")]
    TooLong { n: usize, n_max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("missing tensor '{0}'")]
    MissingTensor(String),
    #[error("unexpected tensor '{0}'")]
    UnexpectedTensor(String),
    #[error("tensor '{name}' has shape {actual:?}, expected {expected:?}")]
    BadShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

pub type ModelResult<V> = Result<V, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    /// Residual-writing projections are drawn at `0.02 / sqrt(2L)`.
    NormalScaled,
    One,
    Zero,
}

/// The full named-tensor schema for a config, in construction order.
fn schema(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.dim;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    out.push(("embed".into(), vec![d, cfg.vocab], Init::Normal));
    if cfg.positional == Positional::Learned && !cfg.variant.is_mla() {
        out.push(("pos".into(), vec![d, cfg.n_max], Init::Normal));
    }
    for l in 1..=cfg.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.push((p("ln1.gain"), vec![d], Init::One));
        out.push((p("ln1.bias"), vec![d], Init::Zero));
        match cfg.variant {
            VariantKind::Mla { d_c, d_r } | VariantKind::SkipV1Mla { d_c, d_r } => {
                out.push((p("attn.w_q"), vec![d, d], Init::Normal));
                if d_r > 0 {
                    out.push((p("attn.w_qr"), vec![d_r, d], Init::Normal));
                }
                out.push((p("attn.w_dkv"), vec![mla_latent_rows(cfg, l), d], Init::Normal));
                out.push((p("attn.w_uk"), vec![d, d_c], Init::Normal));
                out.push((p("attn.w_uv"), vec![d, d_c], Init::Normal));
                if d_r > 0 {
                    out.push((p("attn.w_kr"), vec![d_r, d], Init::Normal));
                }
                out.push((p("attn.w_o"), vec![d, d], Init::NormalScaled));
            }
            _ => {
                out.push((p("attn.w_q"), vec![d, d], Init::Normal));
                let wk = wk_rows(cfg, l);
                if wk > 0 {
                    out.push((p("attn.w_k"), vec![wk, d], Init::Normal));
                }
                let wv = wv_rows(cfg, l);
                if wv > 0 {
                    out.push((p("attn.w_v"), vec![wv, d], Init::Normal));
                }
                out.push((p("attn.w_o"), vec![d, d], Init::NormalScaled));
            }
        }
        out.push((p("ln2.gain"), vec![d], Init::One));
        out.push((p("ln2.bias"), vec![d], Init::Zero));
        out.push((p("ffn.w1"), vec![cfg.ffn_dim, d], Init::Normal));
        out.push((p("ffn.w2"), vec![d, cfg.ffn_dim], Init::NormalScaled));
    }
    out.push(("ln_f.gain".into(), vec![d], Init::One));
    out.push(("ln_f.bias".into(), vec![d], Init::Zero));
    out
}

/// Key-projection rows per layer (mirrors the parameter accounting).
pub(crate) fn wk_rows(cfg: &ModelConfig, layer: usize) -> usize {
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

/// Value-projection rows per layer.
pub(crate) fn wv_rows(cfg: &ModelConfig, layer: usize) -> usize {
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

/// Named-tensor model container. Stored at 32-bit precision; the theory bench
/// converts to 64-bit when it needs tighter gradients.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Gaussian init at std 0.02, residual-writing projections scaled by
/// `1/sqrt(2L)`; reproducible per seed.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> ModelResult<Checkpoint> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scaled_std = 0.02 / (2.0 * cfg.layers as f64).sqrt();
    let mut tensors = BTreeMap::new();
    for (name, shape, init) in schema(cfg) {
        let len: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Normal => (0..len).map(|_| (sample_normal(&mut rng) * 0.02) as f32).collect(),
            Init::NormalScaled => {
                (0..len).map(|_| (sample_normal(&mut rng) * scaled_std) as f32).collect()
            }
            Init::One => vec![1.0; len],
            Init::Zero => vec![0.0; len],
        };
        tensors.insert(name, Tensor::new(shape, data).expect("schema shape"));
    }
    Ok(Checkpoint { config: cfg.clone(), tensors })
}

impl Checkpoint {
    /// Verify that the tensor set matches the config schema exactly.
    pub fn validate(&self) -> ModelResult<()> {
        self.config.validate()?;
        let expected = schema(&self.config);
        for (name, shape, _) in &expected {
            match self.tensors.get(name) {
                None => return Err(ModelError::MissingTensor(name.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(ModelError::BadShape {
                        name: name.clone(),
                        expected: shape.clone(),
                        actual: t.shape().to_vec(),
                    })
                }
                _ => {}
            }
        }
        if self.tensors.len() != expected.len() {
            for name in self.tensors.keys() {
                if !expected.iter().any(|(n, _, _)| n == name) {
                    return Err(ModelError::UnexpectedTensor(name.clone()));
                }
            }
        }
        Ok(())
    }

    /// Total stored scalars (tied embedding counted once, as stored).
    pub fn scalar_count(&self) -> u64 {
        self.tensors.values().map(|t| t.len() as u64).sum()
    }

    /// Full-sequence forward pass to logits (V x n).
    pub fn forward(&self, tokens: &[usize]) -> ModelResult<Tensor<f32>> {
        forward_tokens(&self.config, &self.tensors, tokens)
    }

    pub fn to_f64(&self) -> BTreeMap<String, Tensor<f64>> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.to_f64())).collect()
    }
}

/// Register every named tensor as a tape leaf.
pub fn register_tensors<T: Scalar>(
    tape: &mut Tape<T>,
    tensors: &BTreeMap<String, Tensor<T>>,
) -> BTreeMap<String, Var> {
    tensors.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect()
}

/// Forward-pass products beyond the logits, for probes and analysis.
pub struct ForwardOut {
    pub logits: Var,
    /// Residual stream after each block (length L).
    pub resid_after: Vec<Var>,
    /// Per-layer per-slot value tensors as used by attention.
    pub head_values: Vec<Vec<Var>>,
}

struct VarLookup<'m> {
    map: &'m BTreeMap<String, Var>,
}

impl<'m> VarLookup<'m> {
    fn get(&self, name: &str) -> ModelResult<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }
}

fn attn_vars(cfg: &ModelConfig, v: &VarLookup, layer: usize) -> ModelResult<AttnVars> {
    let p = |s: &str| format!("layer{layer}.{s}");
    Ok(AttnVars {
        heads: cfg.heads,
        d_h: cfg.head_dim(),
        w_q: v.get(&p("attn.w_q"))?,
        w_k: if wk_rows(cfg, layer) > 0 {
            Some(v.get(&p("attn.w_k"))?)
        } else {
            None
        },
        w_v: if wv_rows(cfg, layer) > 0 {
            Some(v.get(&p("attn.w_v"))?)
        } else {
            None
        },
        w_o: v.get(&p("attn.w_o"))?,
    })
}

fn mla_vars(cfg: &ModelConfig, v: &VarLookup, layer: usize) -> ModelResult<MlaVars> {
    let (d_c, d_r) = match cfg.variant {
        VariantKind::Mla { d_c, d_r } | VariantKind::SkipV1Mla { d_c, d_r } => (d_c, d_r),
        _ => unreachable!("mla_vars on non-latent variant"),
    };
    let p = |s: &str| format!("layer{layer}.{s}");
    Ok(MlaVars {
        d: cfg.dim,
        d_c,
        d_r,
        w_q: v.get(&p("attn.w_q"))?,
        w_qr: if d_r > 0 { Some(v.get(&p("attn.w_qr"))?) } else { None },
        w_dkv: v.get(&p("attn.w_dkv"))?,
        w_uk: v.get(&p("attn.w_uk"))?,
        w_uv: v.get(&p("attn.w_uv"))?,
        w_kr: if d_r > 0 { Some(v.get(&p("attn.w_kr"))?) } else { None },
        w_o: v.get(&p("attn.w_o"))?,
    })
}

/// Build the full forward graph on a tape. Layer 1 emits the value bank;
/// deeper layers consume it according to the variant.
pub fn forward_graph<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    vars: &BTreeMap<String, Var>,
    tokens: &[usize],
) -> ModelResult<ForwardOut> {
    let n = tokens.len();
    if n == 0 {
        return Err(ModelError::EmptySequence);
    }
    if n > cfg.n_max {
        return Err(ModelError::TooLong { n, n_max: cfg.n_max });
    }
    for &t in tokens {
        if t >= cfg.vocab {
            return Err(ModelError::TokenOutOfRange { id: t, vocab: cfg.vocab });
        }
    }
    let v = VarLookup { map: vars };
    let embed = v.get("embed")?;
    let mut x = tape.gather_cols(embed, tokens)?;
    if cfg.positional == Positional::Learned && !cfg.variant.is_mla() {
        let pos = v.get("pos")?;
        let pos_n = tape.slice_cols(pos, 0, n)?;
        x = tape.add(x, pos_n)?;
    }
    let rope_pos = (cfg.positional == Positional::Rotary && !cfg.variant.is_mla()).then_some(0);
    let eps = T::from_f64(LN_EPS);
    let half = cfg.layers / 2;

    let mut v1_bank: Option<Vec<Var>> = None;
    let mut k1_bank: Option<Vec<Var>> = None;
    let mut v_mid: Option<Vec<Var>> = None;
    let mut k_mid: Option<Vec<Var>> = None;
    let mut v_prev: Option<Vec<Var>> = None;
    let mut latent1: Option<Var> = None;

    let mut resid_after = Vec::with_capacity(cfg.layers);
    let mut head_values = Vec::with_capacity(cfg.layers);

    for l in 1..=cfg.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        let ln1g = v.get(&p("ln1.gain"))?;
        let ln1b = v.get(&p("ln1.bias"))?;
        let h = tape.layer_norm_cols(x, ln1g, ln1b, eps)?;

        let (contrib, values, keys) = match cfg.variant {
            VariantKind::Mha => {
                let av = attn_vars(cfg, &v, l)?;
                let out = mha_on_tape(tape, h, &av, rope_pos)?;
                (out.contrib, out.v_heads, out.k_heads)
            }
            VariantKind::SkipV1 => {
                let av = attn_vars(cfg, &v, l)?;
                if l == 1 {
                    let out = mha_on_tape(tape, h, &av, rope_pos)?;
                    v1_bank = Some(out.v_heads.clone());
                    (out.contrib, out.v_heads, out.k_heads)
                } else {
                    let map =
                        select_skip_heads(cfg.heads, cfg.skip_ratio, l, cfg.injection)?;
                    let bank = v1_bank.as_ref().expect("layer 1 bank");
                    let out = skip_heads_on_tape(tape, h, bank, &av, &map, rope_pos)?;
                    (out.contrib, out.v_heads, out.k_heads)
                }
            }
            VariantKind::ResFormer { lambda } => {
                let av = attn_vars(cfg, &v, l)?;
                if l == 1 {
                    let out = mha_on_tape(tape, h, &av, rope_pos)?;
                    v1_bank = Some(out.v_heads.clone());
                    (out.contrib, out.v_heads, out.k_heads)
                } else {
                    let map = HeadMap {
                        slots: (0..cfg.heads)
                            .map(|i| HeadSource::LocalBankMix { local: i, bank: i, lambda })
                            .collect(),
                    };
                    let bank = v1_bank.as_ref().expect("layer 1 bank");
                    let out = skip_heads_on_tape(tape, h, bank, &av, &map, rope_pos)?;
                    (out.contrib, out.v_heads, out.k_heads)
                }
            }
            VariantKind::Gqa { groups } => {
                let av = attn_vars(cfg, &v, l)?;
                let out = gqa_on_tape(tape, h, &av, groups, false, None, rope_pos)?;
                (out.contrib, out.v_heads, out.k_heads)
            }
            VariantKind::SkipV1Gqa { groups } => {
                let av = attn_vars(cfg, &v, l)?;
                if l == 1 {
                    let out = gqa_on_tape(tape, h, &av, groups, false, None, rope_pos)?;
                    v1_bank = Some(out.v_heads.clone());
                    (out.contrib, out.v_heads, out.k_heads)
                } else {
                    let bank = v1_bank.as_ref().expect("layer 1 bank");
                    let out =
                        gqa_on_tape(tape, h, &av, groups, true, Some(bank), rope_pos)?;
                    (out.contrib, out.v_heads, out.k_heads)
                }
            }
            VariantKind::Mla { .. } => {
                let mv = mla_vars(cfg, &v, l)?;
                let (contrib, _, value) = mla_on_tape(tape, h, &mv, false, None, 0)?;
                (contrib, vec![value], Vec::new())
            }
            VariantKind::SkipV1Mla { .. } => {
                let mv = mla_vars(cfg, &v, l)?;
                if l == 1 {
                    let (contrib, own, value) = mla_on_tape(tape, h, &mv, false, None, 0)?;
                    latent1 = Some(own);
                    (contrib, vec![value], Vec::new())
                } else {
                    let (contrib, _, value) =
                        mla_on_tape(tape, h, &mv, true, latent1, 0)?;
                    (contrib, vec![value], Vec::new())
                }
            }
            VariantKind::YocoV => {
                let av = attn_vars(cfg, &v, l)?;
                if l <= half {
                    let out = mha_on_tape(tape, h, &av, rope_pos)?;
                    if l == half {
                        v_mid = Some(out.v_heads.clone());
                    }
                    (out.contrib, out.v_heads, out.k_heads)
                } else {
                    let src = v_mid.as_ref().expect("middle-layer values");
                    let out =
                        cross_kv_on_tape(tape, h, &av, None, Some(src), rope_pos)?;
                    (out.contrib, out.v_heads, out.k_heads)
                }
            }
            VariantKind::ClaV { period } => {
                let av = attn_vars(cfg, &v, l)?;
                if cfg.cla_computes(l, period) {
                    let out = mha_on_tape(tape, h, &av, rope_pos)?;
                    v_prev = Some(out.v_heads.clone());
                    (out.contrib, out.v_heads, out.k_heads)
                } else {
                    let src = v_prev.as_ref().expect("previous computing layer");
                    let out =
                        cross_kv_on_tape(tape, h, &av, None, Some(src), rope_pos)?;
                    (out.contrib, out.v_heads, out.k_heads)
                }
            }
            VariantKind::SkipKv1 => {
                let av = attn_vars(cfg, &v, l)?;
                if l == 1 {
                    let out = mha_on_tape(tape, h, &av, rope_pos)?;
                    v1_bank = Some(out.v_heads.clone());
                    k1_bank = Some(out.k_heads.clone());
                    (out.contrib, out.v_heads, out.k_heads)
                } else {
                    let ks = k1_bank.as_ref().expect("layer 1 keys");
                    let vs = v1_bank.as_ref().expect("layer 1 values");
                    let out =
                        cross_kv_on_tape(tape, h, &av, Some(ks), Some(vs), rope_pos)?;
                    (out.contrib, out.v_heads, out.k_heads)
                }
            }
            VariantKind::SkipV1Yoco => {
                let av = attn_vars(cfg, &v, l)?;
                if l == 1 {
                    let out = mha_on_tape(tape, h, &av, rope_pos)?;
                    v1_bank = Some(out.v_heads.clone());
                    if l == half {
                        k_mid = Some(out.k_heads.clone());
                    }
                    (out.contrib, out.v_heads, out.k_heads)
                } else if l <= half {
                    let map =
                        select_skip_heads(cfg.heads, cfg.skip_ratio, l, cfg.injection)?;
                    let bank = v1_bank.as_ref().expect("layer 1 bank");
                    let out = skip_heads_on_tape(tape, h, bank, &av, &map, rope_pos)?;
                    if l == half {
                        k_mid = Some(out.k_heads.clone());
                    }
                    (out.contrib, out.v_heads, out.k_heads)
                } else {
                    // Local half values, bank half, keys from layer L/2.
                    let map =
                        select_skip_heads(cfg.heads, cfg.skip_ratio, l, cfg.injection)?;
                    let bank = v1_bank.as_ref().expect("layer 1 bank");
                    let wv = av.w_v.ok_or_else(|| {
                        ModelError::MissingTensor(p("attn.w_v"))
                    })?;
                    let vloc = tape.matmul(wv, h)?;
                    let locals =
                        attn::split_rows(tape, vloc, map.local_count(), cfg.head_dim())?;
                    let mut sources = Vec::with_capacity(cfg.heads);
                    for src in &map.slots {
                        sources.push(attn::resolve_value(tape, *src, &locals, bank)?);
                    }
                    let ks = k_mid.as_ref().expect("middle-layer keys");
                    let out =
                        cross_kv_on_tape(tape, h, &av, Some(ks), Some(&sources), rope_pos)?;
                    (out.contrib, out.v_heads, out.k_heads)
                }
            }
        };
        let _ = keys;
        x = tape.add(x, contrib)?;

        let ln2g = v.get(&p("ln2.gain"))?;
        let ln2b = v.get(&p("ln2.bias"))?;
        let h2 = tape.layer_norm_cols(x, ln2g, ln2b, eps)?;
        let w1 = v.get(&p("ffn.w1"))?;
        let w2 = v.get(&p("ffn.w2"))?;
        let f1 = tape.matmul(w1, h2)?;
        let fr = tape.relu(f1);
        let f2 = tape.matmul(w2, fr)?;
        x = tape.add(x, f2)?;

        resid_after.push(x);
        head_values.push(values);
    }

    let lnfg = v.get("ln_f.gain")?;
    let lnfb = v.get("ln_f.bias")?;
    let hf = tape.layer_norm_cols(x, lnfg, lnfb, eps)?;
    let unembed = tape.transpose(embed);
    let logits = tape.matmul(unembed, hf)?;
    Ok(ForwardOut { logits, resid_after, head_values })
}

/// Forward pass over plain tensors (throwaway tape).
pub fn forward_tokens<T: Scalar>(
    cfg: &ModelConfig,
    tensors: &BTreeMap<String, Tensor<T>>,
    tokens: &[usize],
) -> ModelResult<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = register_tensors(&mut tape, tensors);
    let out = forward_graph(&mut tape, cfg, &vars, tokens)?;
    Ok(tape.value(out.logits).clone())
}

/// Next-token loss graph: forward on `tokens`, mean cross-entropy against
/// `targets` (same length). Returns the loss node and the parameter vars.
pub fn loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    tensors: &BTreeMap<String, Tensor<T>>,
    tokens: &[usize],
    targets: &[usize],
) -> ModelResult<(Var, BTreeMap<String, Var>)> {
    let vars = register_tensors(tape, tensors);
    let out = forward_graph(tape, cfg, &vars, tokens)?;
    let loss = tape.cross_entropy(out.logits, targets)?;
    Ok((loss, vars))
}
