//! Attention variants: standard multi-head, first-layer value skip, scalar
//! value interpolation, grouped K/V, low-rank latent K/V, and the cross-layer
//! K/V substitution family. All forwards are built from the same per-head
//! attention primitive so gradients flow through every variant.

use crate::tape::{Tape, Var};
use crate::tensor::{NumResult, NumericError, Scalar, Tensor};

/// Where a head slot takes its value tensor from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadSource {
    /// Value computed by this layer; payload is the index into the layer's
    /// local value blocks.
    Local(usize),
    /// Value taken verbatim from the layer-1 bank; payload is the bank head.
    Bank(usize),
    /// Head-wise average of two bank heads.
    BankAvg(usize, usize),
    /// Interpolation `lambda * local + (1 - lambda) * bank`.
    LocalBankMix { local: usize, bank: usize, lambda: f64 },
}

/// Per-slot value sources for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMap {
    pub slots: Vec<HeadSource>,
}

impl HeadMap {
    pub fn all_local(heads: usize) -> Self {
        Self {
            slots: (0..heads).map(HeadSource::Local).collect(),
        }
    }

    /// Number of locally computed value blocks the map consumes.
    pub fn local_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s, HeadSource::Local(_) | HeadSource::LocalBankMix { .. }))
            .count()
    }
}

/// Head injection strategies for choosing which slots read the layer-1 bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadInjection {
    /// Keep the first `H'` heads local, take the rest from layer 1 at the
    /// same slot index. Identical for every consuming layer.
    SecondHalf,
    /// Skip slots receive the head-wise average of bank heads `i` and
    /// `i + H/2`.
    Pooling,
    /// Rotating assignment: layer `l` injects bank head `(l + j) mod H` into
    /// slot `(l + j + H/2) mod H`.
    Dynamic,
    /// Odd layers read the first half of the bank, even layers the second.
    OddEven,
    /// Second-half injection plus a 0.5 interpolation of bank heads into the
    /// local half.
    SkipV1PlusRes,
}

fn config_err(msg: String) -> NumericError {
    NumericError::InvalidArgument { op: "select_skip_heads", msg }
}

/// Number of locally computed heads for a skip ratio.
pub fn local_heads(heads: usize, ratio: f64) -> usize {
    ((1.0 - ratio) * heads as f64).round() as usize
}

/// Build the per-slot value-source mapping for a consuming layer (`layer >= 2`,
/// 1-based). `ratio` is the fraction of heads whose values come from layer 1.
pub fn select_skip_heads(
    heads: usize,
    ratio: f64,
    layer: usize,
    injection: HeadInjection,
) -> NumResult<HeadMap> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(config_err(format!("skip ratio must be in [0, 1), got {ratio}")));
    }
    if layer < 2 {
        return Err(config_err(format!("skip heads apply from layer 2, got layer {layer}")));
    }
    let h_local = local_heads(heads, ratio);
    if h_local == 0 {
        return Err(config_err("at least one head must stay local".into()));
    }
    if ratio == 0.0 {
        return Ok(HeadMap::all_local(heads));
    }
    match injection {
        HeadInjection::SecondHalf => {
            let mut slots = Vec::with_capacity(heads);
            for p in 0..heads {
                slots.push(if p < h_local {
                    HeadSource::Local(p)
                } else {
                    HeadSource::Bank(p)
                });
            }
            Ok(HeadMap { slots })
        }
        HeadInjection::Pooling => {
            require_half(heads, h_local, "pooling")?;
            let half = heads / 2;
            let mut slots = Vec::with_capacity(heads);
            for p in 0..heads {
                slots.push(if p < half {
                    HeadSource::Local(p)
                } else {
                    HeadSource::BankAvg(p - half, p)
                });
            }
            Ok(HeadMap { slots })
        }
        HeadInjection::Dynamic => {
            require_half(heads, h_local, "dynamic")?;
            let half = heads / 2;
            let mut slots = vec![HeadSource::Local(usize::MAX); heads];
            for j in 0..half {
                let bank = (layer + j) % heads;
                let pos = (layer + j + half) % heads;
                slots[pos] = HeadSource::Bank(bank);
            }
            let mut next_local = 0;
            for slot in slots.iter_mut() {
                if matches!(slot, HeadSource::Local(_)) {
                    *slot = HeadSource::Local(next_local);
                    next_local += 1;
                }
            }
            Ok(HeadMap { slots })
        }
        HeadInjection::OddEven => {
            require_half(heads, h_local, "odd/even")?;
            let half = heads / 2;
            let offset = if layer % 2 == 1 { 0 } else { half };
            let mut slots = Vec::with_capacity(heads);
            for p in 0..heads {
                slots.push(if p < half {
                    HeadSource::Local(p)
                } else {
                    HeadSource::Bank(p - half + offset)
                });
            }
            Ok(HeadMap { slots })
        }
        HeadInjection::SkipV1PlusRes => {
            require_half(heads, h_local, "skip+res")?;
            let half = heads / 2;
            let mut slots = Vec::with_capacity(heads);
            for p in 0..heads {
                slots.push(if p < half {
                    HeadSource::LocalBankMix { local: p, bank: p, lambda: 0.5 }
                } else {
                    HeadSource::Bank(p)
                });
            }
            Ok(HeadMap { slots })
        }
    }
}

fn require_half(heads: usize, h_local: usize, name: &str) -> NumResult<()> {
    if heads % 2 != 0 || h_local != heads / 2 {
        return Err(config_err(format!(
            "{name} injection is defined for a 0.5 skip ratio with an even head count"
        )));
    }
    Ok(())
}

// ── Tape-level builders ─────────────────────────────────────────────────────

/// Registered attention weights for the head-structured variants. `w_v` is
/// present only if the layer computes any values locally; `w_k` is absent on
/// layers that reuse keys from elsewhere.
#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub heads: usize,
    pub d_h: usize,
    pub w_q: Var,
    pub w_k: Option<Var>,
    pub w_v: Option<Var>,
    pub w_o: Var,
}

impl AttnVars {
    fn require_k(&self) -> NumResult<Var> {
        self.w_k.ok_or_else(|| NumericError::InvalidArgument {
            op: "attention",
            msg: "missing key projection".into(),
        })
    }

    fn require_v(&self) -> NumResult<Var> {
        self.w_v.ok_or_else(|| NumericError::InvalidArgument {
            op: "attention",
            msg: "missing value projection on a head that must compute locally".into(),
        })
    }
}

/// Registered weights for latent-compressed attention.
#[derive(Debug, Clone, Copy)]
pub struct MlaVars {
    pub d: usize,
    pub d_c: usize,
    pub d_r: usize,
    pub w_q: Var,
    pub w_qr: Option<Var>,
    pub w_dkv: Var,
    pub w_uk: Var,
    pub w_uv: Var,
    pub w_kr: Option<Var>,
    pub w_o: Var,
}

/// Attention result: summed head contributions (no residual) plus the
/// per-slot value and key tensors for banking, caching and analysis.
pub struct AttnOut {
    pub contrib: Var,
    pub v_heads: Vec<Var>,
    pub k_heads: Vec<Var>,
}

/// One attention head ready to attend.
pub struct HeadPlan {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub w_o_block: Var,
}

/// `sum_h W_O^h V^h softmax(scale * (K^h)^T Q^h)` with the causal mask.
pub fn attend<T: Scalar>(tape: &mut Tape<T>, plans: &[HeadPlan], scale: T) -> NumResult<Var> {
    let mut total: Option<Var> = None;
    for plan in plans {
        let kt = tape.transpose(plan.k);
        let scores = tape.matmul(kt, plan.q)?;
        let weights = tape.causal_softmax(scores, scale)?;
        let mixed = tape.matmul(plan.v, weights)?;
        let contrib = tape.matmul(plan.w_o_block, mixed)?;
        total = Some(match total {
            Some(t) => tape.add(t, contrib)?,
            None => contrib,
        });
    }
    total.ok_or(NumericError::EmptyInput { op: "attend" })
}

/// Slice a stacked projection (`blocks * d_h` rows) into per-block matrices.
pub fn split_rows<T: Scalar>(
    tape: &mut Tape<T>,
    stacked: Var,
    blocks: usize,
    d_h: usize,
) -> NumResult<Vec<Var>> {
    (0..blocks)
        .map(|b| tape.slice_rows(stacked, b * d_h, (b + 1) * d_h))
        .collect()
}

/// Slice an output projection (`d x (blocks * d_h)`) into per-block columns.
pub fn split_cols<T: Scalar>(
    tape: &mut Tape<T>,
    w_o: Var,
    blocks: usize,
    d_h: usize,
) -> NumResult<Vec<Var>> {
    (0..blocks)
        .map(|b| tape.slice_cols(w_o, b * d_h, (b + 1) * d_h))
        .collect()
}

fn maybe_rope<T: Scalar>(
    tape: &mut Tape<T>,
    heads: &[Var],
    rope_pos: Option<usize>,
) -> NumResult<Vec<Var>> {
    match rope_pos {
        None => Ok(heads.to_vec()),
        Some(pos0) => heads.iter().map(|&h| tape.rope(h, pos0, 10000.0)).collect(),
    }
}

/// Resolve a head slot's value tensor from local blocks and the bank.
pub fn resolve_value<T: Scalar>(
    tape: &mut Tape<T>,
    source: HeadSource,
    local: &[Var],
    bank: &[Var],
) -> NumResult<Var> {
    let pick = |arr: &[Var], i: usize, what: &str| -> NumResult<Var> {
        arr.get(i).copied().ok_or_else(|| NumericError::InvalidArgument {
            op: "resolve_value",
            msg: format!("{what} head {i} out of range ({} available)", arr.len()),
        })
    };
    match source {
        HeadSource::Local(i) => pick(local, i, "local"),
        HeadSource::Bank(i) => pick(bank, i, "bank"),
        HeadSource::BankAvg(i, j) => {
            let a = pick(bank, i, "bank")?;
            let b = pick(bank, j, "bank")?;
            let sum = tape.add(a, b)?;
            Ok(tape.scale(sum, T::from_f64(0.5)))
        }
        HeadSource::LocalBankMix { local: li, bank: bi, lambda } => {
            let a = pick(local, li, "local")?;
            let b = pick(bank, bi, "bank")?;
            tape.lerp(a, b, T::from_f64(lambda))
        }
    }
}

fn head_scale<T: Scalar>(d_h: usize) -> T {
    T::from_f64(1.0 / (d_h as f64).sqrt())
}

/// Standard multi-head attention contribution, all heads local.
pub fn mha_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: &AttnVars,
    rope_pos: Option<usize>,
) -> NumResult<AttnOut> {
    let map = HeadMap::all_local(w.heads);
    skip_heads_on_tape(tape, x, &[], w, &map, rope_pos)
}

/// Attention with per-slot value sources resolved through `map`.
pub fn skip_heads_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    bank: &[Var],
    w: &AttnVars,
    map: &HeadMap,
    rope_pos: Option<usize>,
) -> NumResult<AttnOut> {
    let (h, d_h) = (w.heads, w.d_h);
    if map.slots.len() != h {
        return Err(NumericError::InvalidArgument {
            op: "attn_skip",
            msg: format!("head map covers {} slots, layer has {h} heads", map.slots.len()),
        });
    }
    let q = tape.matmul(w.w_q, x)?;
    let wk = w.require_k()?;
    let k = tape.matmul(wk, x)?;
    let qs0 = split_rows(tape, q, h, d_h)?;
    let ks0 = split_rows(tape, k, h, d_h)?;
    let qs = maybe_rope(tape, &qs0, rope_pos)?;
    let ks = maybe_rope(tape, &ks0, rope_pos)?;
    let os = split_cols(tape, w.w_o, h, d_h)?;
    let local_count = map.local_count();
    let locals = if local_count > 0 {
        let wv = w.require_v()?;
        let v = tape.matmul(wv, x)?;
        split_rows(tape, v, local_count, d_h)?
    } else {
        Vec::new()
    };
    let mut plans = Vec::with_capacity(h);
    let mut values = Vec::with_capacity(h);
    for (slot, src) in map.slots.iter().enumerate() {
        let v = resolve_value(tape, *src, &locals, bank)?;
        values.push(v);
        plans.push(HeadPlan { q: qs[slot], k: ks[slot], v, w_o_block: os[slot] });
    }
    let contrib = attend(tape, &plans, head_scale(d_h))?;
    Ok(AttnOut { contrib, v_heads: values, k_heads: ks })
}

/// Grouped-query attention: `groups` shared K/V blocks, `heads/groups` query
/// heads each. With `skip`, the second half of the groups read their value
/// block from the layer-1 group bank.
pub fn gqa_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: &AttnVars,
    groups: usize,
    skip: bool,
    bank: Option<&[Var]>,
    rope_pos: Option<usize>,
) -> NumResult<AttnOut> {
    let (h, d_h) = (w.heads, w.d_h);
    if groups == 0 || h % groups != 0 {
        return Err(NumericError::InvalidArgument {
            op: "attn_gqa",
            msg: format!("groups {groups} must divide head count {h}"),
        });
    }
    let q = tape.matmul(w.w_q, x)?;
    let wk = w.require_k()?;
    let k = tape.matmul(wk, x)?;
    let qs0 = split_rows(tape, q, h, d_h)?;
    let ks0 = split_rows(tape, k, groups, d_h)?;
    let qs = maybe_rope(tape, &qs0, rope_pos)?;
    let ks = maybe_rope(tape, &ks0, rope_pos)?;
    let os = split_cols(tape, w.w_o, h, d_h)?;

    let local_groups = if skip { local_heads(groups, 0.5) } else { groups };
    let locals = if local_groups > 0 {
        let wv = w.require_v()?;
        let v = tape.matmul(wv, x)?;
        split_rows(tape, v, local_groups, d_h)?
    } else {
        Vec::new()
    };
    let mut group_values = Vec::with_capacity(groups);
    for g in 0..groups {
        if g < local_groups {
            group_values.push(locals[g]);
        } else {
            let bank = bank.ok_or_else(|| NumericError::InvalidArgument {
                op: "attn_gqa",
                msg: "skip grouping requires a layer-1 value bank".into(),
            })?;
            let bv = *bank.get(g).ok_or_else(|| NumericError::InvalidArgument {
                op: "attn_gqa",
                msg: format!("bank group {g} missing ({} available)", bank.len()),
            })?;
            group_values.push(bv);
        }
    }

    let per_group = h / groups;
    let mut plans = Vec::with_capacity(h);
    for (i, &q) in qs.iter().enumerate() {
        let g = i / per_group;
        plans.push(HeadPlan { q, k: ks[g], v: group_values[g], w_o_block: os[i] });
    }
    let contrib = attend(tape, &plans, head_scale(d_h))?;
    Ok(AttnOut { contrib, v_heads: group_values, k_heads: ks })
}

/// Latent-compressed attention. Keys are `[rotary(W_KR X); W_UK C]`, values
/// `W_UV C`. With `skip`, the layer computes only the first `d_c/2` latent
/// rows and takes the rest from `latent_bank`. Returns the contribution and
/// the locally computed latent rows (what a decoder would cache).
pub fn mla_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: &MlaVars,
    skip: bool,
    latent_bank: Option<Var>,
    pos0: usize,
) -> NumResult<(Var, Var, Var)> {
    if skip && w.d_c % 2 != 0 {
        return Err(NumericError::InvalidArgument {
            op: "attn_mla",
            msg: format!("latent dim {} must be even to interleave halves", w.d_c),
        });
    }
    let own_latent = tape.matmul(w.w_dkv, x)?;
    let latent = if skip {
        let bank = latent_bank.ok_or_else(|| NumericError::InvalidArgument {
            op: "attn_mla",
            msg: "latent skip requires the layer-1 latent bank".into(),
        })?;
        let tail = tape.slice_rows(bank, w.d_c / 2, w.d_c)?;
        tape.concat_rows(own_latent, tail)?
    } else {
        own_latent
    };

    let k_c = tape.matmul(w.w_uk, latent)?;
    let v = tape.matmul(w.w_uv, latent)?;
    let q_c = tape.matmul(w.w_q, x)?;

    let (k, q) = if w.d_r > 0 {
        let w_kr = w.w_kr.ok_or_else(|| NumericError::InvalidArgument {
            op: "attn_mla",
            msg: "d_r > 0 requires a rotary key projection".into(),
        })?;
        let w_qr = w.w_qr.ok_or_else(|| NumericError::InvalidArgument {
            op: "attn_mla",
            msg: "d_r > 0 requires a rotary query projection".into(),
        })?;
        let kr_raw = tape.matmul(w_kr, x)?;
        let qr_raw = tape.matmul(w_qr, x)?;
        let k_r = tape.rope(kr_raw, pos0, 10000.0)?;
        let q_r = tape.rope(qr_raw, pos0, 10000.0)?;
        (tape.concat_rows(k_r, k_c)?, tape.concat_rows(q_r, q_c)?)
    } else {
        (k_c, q_c)
    };

    let plan = HeadPlan { q, k, v, w_o_block: w.w_o };
    let scale = T::from_f64(1.0 / ((w.d + w.d_r) as f64).sqrt());
    let contrib = attend(tape, std::slice::from_ref(&plan), scale)?;
    Ok((contrib, own_latent, v))
}

/// Attention with substituted key/value sources. Realizes the cross-layer
/// reuse family: middle-layer key reuse, adjacent-pair value sharing, and
/// full first-layer K/V reuse. `None` sources fall back to local projections.
pub fn cross_kv_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: &AttnVars,
    k_source: Option<&[Var]>,
    v_source: Option<&[Var]>,
    rope_pos: Option<usize>,
) -> NumResult<AttnOut> {
    let (h, d_h) = (w.heads, w.d_h);
    let q = tape.matmul(w.w_q, x)?;
    let qs0 = split_rows(tape, q, h, d_h)?;
    let qs = maybe_rope(tape, &qs0, rope_pos)?;
    let os = split_cols(tape, w.w_o, h, d_h)?;

    let ks: Vec<Var> = match k_source {
        Some(src) => src.to_vec(),
        None => {
            let wk = w.require_k()?;
            let k = tape.matmul(wk, x)?;
            let ks0 = split_rows(tape, k, h, d_h)?;
            maybe_rope(tape, &ks0, rope_pos)?
        }
    };
    let vs: Vec<Var> = match v_source {
        Some(src) => src.to_vec(),
        None => {
            let wv = w.require_v()?;
            let v = tape.matmul(wv, x)?;
            split_rows(tape, v, h, d_h)?
        }
    };
    if ks.len() != h || vs.len() != h {
        return Err(NumericError::InvalidArgument {
            op: "attn_cross_kv",
            msg: format!("need {h} K and V heads, got {} and {}", ks.len(), vs.len()),
        });
    }
    // Source sequence length must match the queries.
    let n = tape.value(x).cols();
    for &s in ks.iter().chain(vs.iter()) {
        let sv = tape.value(s);
        if sv.cols() != n {
            return Err(NumericError::ShapeMismatch {
                op: "attn_cross_kv",
                lhs: sv.shape().to_vec(),
                rhs: vec![d_h, n],
            });
        }
    }
    let plans: Vec<HeadPlan> = (0..h)
        .map(|i| HeadPlan { q: qs[i], k: ks[i], v: vs[i], w_o_block: os[i] })
        .collect();
    let contrib = attend(tape, &plans, head_scale(d_h))?;
    Ok(AttnOut { contrib, v_heads: vs, k_heads: ks })
}

// ── Plain-tensor operation surface ──────────────────────────────────────────

/// Per-layer attention weights for the head-structured variants.
#[derive(Debug, Clone)]
pub struct AttnWeights<T> {
    pub heads: usize,
    pub d_h: usize,
    pub w_q: Tensor<T>,
    pub w_k: Option<Tensor<T>>,
    pub w_v: Option<Tensor<T>>,
    pub w_o: Tensor<T>,
}

impl<T: Scalar> AttnWeights<T> {
    pub fn register(&self, tape: &mut Tape<T>) -> AttnVars {
        AttnVars {
            heads: self.heads,
            d_h: self.d_h,
            w_q: tape.leaf(self.w_q.clone()),
            w_k: self.w_k.as_ref().map(|t| tape.leaf(t.clone())),
            w_v: self.w_v.as_ref().map(|t| tape.leaf(t.clone())),
            w_o: tape.leaf(self.w_o.clone()),
        }
    }
}

/// Plain weights for latent-compressed attention.
#[derive(Debug, Clone)]
pub struct MlaWeights<T> {
    pub d_c: usize,
    pub d_r: usize,
    pub w_q: Tensor<T>,
    pub w_qr: Option<Tensor<T>>,
    pub w_dkv: Tensor<T>,
    pub w_uk: Tensor<T>,
    pub w_uv: Tensor<T>,
    pub w_kr: Option<Tensor<T>>,
    pub w_o: Tensor<T>,
}

impl<T: Scalar> MlaWeights<T> {
    pub fn register(&self, tape: &mut Tape<T>) -> MlaVars {
        MlaVars {
            d: self.w_q.rows(),
            d_c: self.d_c,
            d_r: self.d_r,
            w_q: tape.leaf(self.w_q.clone()),
            w_qr: self.w_qr.as_ref().map(|t| tape.leaf(t.clone())),
            w_dkv: tape.leaf(self.w_dkv.clone()),
            w_uk: tape.leaf(self.w_uk.clone()),
            w_uv: tape.leaf(self.w_uv.clone()),
            w_kr: self.w_kr.as_ref().map(|t| tape.leaf(t.clone())),
            w_o: tape.leaf(self.w_o.clone()),
        }
    }
}

/// Standard multi-head attention: `Y = X + sum_h W_O^h V^h softmax(...)`.
/// Also returns the per-head value tensors for bank or cache use.
pub fn attn_mha<T: Scalar>(
    x: &Tensor<T>,
    w: &AttnWeights<T>,
) -> NumResult<(Tensor<T>, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let vars = w.register(&mut tape);
    let out = mha_on_tape(&mut tape, xv, &vars, None)?;
    let y = tape.add(xv, out.contrib)?;
    let values = out.v_heads.iter().map(|&v| tape.value(v).clone()).collect();
    Ok((tape.value(y).clone(), values))
}

/// First-layer value skip: slots resolve their values through `map`.
pub fn attn_skipv1<T: Scalar>(
    x: &Tensor<T>,
    bank: &[Tensor<T>],
    w: &AttnWeights<T>,
    map: &HeadMap,
) -> NumResult<Tensor<T>> {
    for b in bank {
        if b.rows() != w.d_h || b.cols() != x.cols() {
            return Err(NumericError::InvalidArgument {
                op: "attn_skipv1",
                msg: format!(
                    "bank head shape {:?} does not match d_h {} x n {}",
                    b.shape(),
                    w.d_h,
                    x.cols()
                ),
            });
        }
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let bank_vars: Vec<Var> = bank.iter().map(|b| tape.leaf(b.clone())).collect();
    let vars = w.register(&mut tape);
    let out = skip_heads_on_tape(&mut tape, xv, &bank_vars, &vars, map, None)?;
    let y = tape.add(xv, out.contrib)?;
    Ok(tape.value(y).clone())
}

/// Scalar interpolation of every head's value with its bank counterpart:
/// `lambda V^h + (1 - lambda) V1^h`.
pub fn attn_resformer<T: Scalar>(
    x: &Tensor<T>,
    bank: &[Tensor<T>],
    w: &AttnWeights<T>,
    lambda: f64,
) -> NumResult<Tensor<T>> {
    let map = HeadMap {
        slots: (0..w.heads)
            .map(|i| HeadSource::LocalBankMix { local: i, bank: i, lambda })
            .collect(),
    };
    attn_skipv1(x, bank, w, &map)
}

/// Grouped-query attention over plain tensors.
pub fn attn_gqa<T: Scalar>(
    x: &Tensor<T>,
    w: &AttnWeights<T>,
    groups: usize,
    skip: bool,
    bank: Option<&[Tensor<T>]>,
) -> NumResult<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let bank_vars: Option<Vec<Var>> =
        bank.map(|b| b.iter().map(|t| tape.leaf(t.clone())).collect());
    let vars = w.register(&mut tape);
    let out = gqa_on_tape(&mut tape, xv, &vars, groups, skip, bank_vars.as_deref(), None)?;
    let y = tape.add(xv, out.contrib)?;
    Ok(tape.value(y).clone())
}

/// Latent-compressed attention over plain tensors. Returns the output (with
/// residual) and the locally computed latent rows.
pub fn attn_mla<T: Scalar>(
    x: &Tensor<T>,
    w: &MlaWeights<T>,
    skip: bool,
    latent_bank: Option<&Tensor<T>>,
) -> NumResult<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let bank = latent_bank.map(|b| tape.leaf(b.clone()));
    let vars = w.register(&mut tape);
    let (contrib, latent, _) = mla_on_tape(&mut tape, xv, &vars, skip, bank, 0)?;
    let y = tape.add(xv, contrib)?;
    Ok((tape.value(y).clone(), tape.value(latent).clone()))
}

/// Substituted-K/V attention over plain tensors.
pub fn attn_cross_kv<T: Scalar>(
    x: &Tensor<T>,
    w: &AttnWeights<T>,
    k_source: Option<&[Tensor<T>]>,
    v_source: Option<&[Tensor<T>]>,
) -> NumResult<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let ks: Option<Vec<Var>> = k_source.map(|s| s.iter().map(|t| tape.leaf(t.clone())).collect());
    let vs: Option<Vec<Var>> = v_source.map(|s| s.iter().map(|t| tape.leaf(t.clone())).collect());
    let vars = w.register(&mut tape);
    let out = cross_kv_on_tape(&mut tape, xv, &vars, ks.as_deref(), vs.as_deref(), None)?;
    let y = tape.add(xv, out.contrib)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{add, matmul, transpose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-0.8..0.8)).collect()).unwrap()
    }

    fn mha_weights(d: usize, h: usize, rng: &mut ChaCha8Rng) -> AttnWeights<f64> {
        AttnWeights {
            heads: h,
            d_h: d / h,
            w_q: rand_mat(d, d, rng),
            w_k: Some(rand_mat(d, d, rng)),
            w_v: Some(rand_mat(d, d, rng)),
            w_o: rand_mat(d, d, rng),
        }
    }

    /// Straight-line dense oracle: per-head attention written without any of
    /// the module's plumbing (explicit loops, naive softmax), over an
    /// explicitly assembled full value matrix.
    fn dense_attention_oracle(
        x: &Tensor<f64>,
        w: &AttnWeights<f64>,
        v_full: &Tensor<f64>,
    ) -> Tensor<f64> {
        let (d, n) = (x.rows(), x.cols());
        let (h, d_h) = (w.heads, w.d_h);
        let q = matmul(&w.w_q, x).unwrap();
        let k = matmul(w.w_k.as_ref().unwrap(), x).unwrap();
        let scale = 1.0 / (d_h as f64).sqrt();
        let mut y = x.clone();
        for head in 0..h {
            for j in 0..n {
                let mut logits = vec![0.0; j + 1];
                for (i, logit) in logits.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for r in 0..d_h {
                        s += k.at(head * d_h + r, i) * q.at(head * d_h + r, j);
                    }
                    *logit = s * scale;
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for row in 0..d {
                    let mut acc = 0.0;
                    for (i, e) in exps.iter().enumerate() {
                        let mut val = 0.0;
                        for r in 0..d_h {
                            val += w.w_o.at(row, head * d_h + r) * v_full.at(head * d_h + r, i);
                        }
                        acc += val * e / denom;
                    }
                    *y.at_mut(row, j) += acc;
                }
            }
        }
        y
    }

    #[test]
    fn mha_single_token_residual_mixing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = 4;
        let w = mha_weights(d, 2, &mut rng);
        let x = rand_mat(d, 1, &mut rng);
        let (y, _) = attn_mha(&x, &w).unwrap();
        // n=1: attention weight is [[1]], so Y = X + sum_h W_O^h W_V^h X.
        let v = matmul(w.w_v.as_ref().unwrap(), &x).unwrap();
        let expect = add(&x, &matmul(&w.w_o, &v).unwrap()).unwrap();
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mha_zero_weights_residual_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 4;
        let w = AttnWeights {
            heads: 2,
            d_h: 2,
            w_q: Tensor::zeros(vec![d, d]),
            w_k: Some(Tensor::zeros(vec![d, d])),
            w_v: Some(Tensor::zeros(vec![d, d])),
            w_o: Tensor::zeros(vec![d, d]),
        };
        let x = rand_mat(d, 3, &mut rng);
        let (y, _) = attn_mha(&x, &w).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn mha_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = mha_weights(4, 2, &mut rng);
        let x = rand_mat(4, 3, &mut rng);
        let (y, _) = attn_mha(&x, &w).unwrap();
        let v_full = matmul(w.w_v.as_ref().unwrap(), &x).unwrap();
        let oracle = dense_attention_oracle(&x, &w, &v_full);
        for (a, b) in y.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn mha_missing_values_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = mha_weights(4, 2, &mut rng);
        w.w_v = None;
        let x = rand_mat(4, 2, &mut rng);
        assert!(attn_mha(&x, &w).is_err());
    }

    #[test]
    fn skipv1_with_degenerate_bank_equals_mha() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 4;
        let w = mha_weights(d, 2, &mut rng);
        let x = rand_mat(d, 3, &mut rng);
        let (y_mha, v_heads) = attn_mha(&x, &w).unwrap();
        // Bank identical to what local W_V would produce -> bitwise equal.
        let map = select_skip_heads(2, 0.5, 2, HeadInjection::SecondHalf).unwrap();
        let mut w_skip = w.clone();
        let wv = w.w_v.as_ref().unwrap();
        w_skip.w_v = Some(Tensor::new(vec![2, d], wv.data()[..2 * d].to_vec()).unwrap());
        let y_skip = attn_skipv1(&x, &v_heads, &w_skip, &map).unwrap();
        assert_eq!(y_skip.data(), y_mha.data());
    }

    #[test]
    fn skipv1_ratio_zero_equals_mha() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = mha_weights(4, 2, &mut rng);
        let x = rand_mat(4, 3, &mut rng);
        let (y_mha, v_heads) = attn_mha(&x, &w).unwrap();
        let map = select_skip_heads(2, 0.0, 3, HeadInjection::SecondHalf).unwrap();
        let y = attn_skipv1(&x, &v_heads, &w, &map).unwrap();
        for (a, b) in y.data().iter().zip(y_mha.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn skipv1_matches_explicit_concatenation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 4;
        let h = 2;
        let w = mha_weights(d, h, &mut rng);
        let x = rand_mat(d, 3, &mut rng);
        let bank: Vec<Tensor<f64>> = (0..h).map(|_| rand_mat(2, 3, &mut rng)).collect();
        let local_wv =
            Tensor::new(vec![2, d], w.w_v.as_ref().unwrap().data()[..2 * d].to_vec()).unwrap();
        let mut w_skip = w.clone();
        w_skip.w_v = Some(local_wv.clone());
        let map = select_skip_heads(h, 0.5, 2, HeadInjection::SecondHalf).unwrap();
        let y = attn_skipv1(&x, &bank, &w_skip, &map).unwrap();

        // Oracle: concatenate [local V^1; bank V^2] then run the dense loop.
        let v1 = matmul(&local_wv, &x).unwrap();
        let mut v_full = Tensor::zeros(vec![d, 3]);
        for j in 0..3 {
            for r in 0..2 {
                *v_full.at_mut(r, j) = v1.at(r, j);
                *v_full.at_mut(2 + r, j) = bank[1].at(r, j);
            }
        }
        let expect = dense_attention_oracle(&x, &w, &v_full);
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn resformer_endpoints_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = mha_weights(4, 2, &mut rng);
        let x = rand_mat(4, 3, &mut rng);
        let bank: Vec<Tensor<f64>> = (0..2).map(|_| rand_mat(2, 3, &mut rng)).collect();
        let (y_mha, _) = attn_mha(&x, &w).unwrap();

        // lambda = 1 collapses to MHA.
        let y1 = attn_resformer(&x, &bank, &w, 1.0).unwrap();
        for (a, b) in y1.data().iter().zip(y_mha.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // lambda = 0 uses bank values for every head.
        let y0 = attn_resformer(&x, &bank, &w, 0.0).unwrap();
        let map = HeadMap { slots: vec![HeadSource::Bank(0), HeadSource::Bank(1)] };
        let expect = attn_skipv1(&x, &bank, &w, &map).unwrap();
        for (a, b) in y0.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resformer_half_matches_average_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = mha_weights(4, 2, &mut rng);
        let x = rand_mat(4, 3, &mut rng);
        let bank: Vec<Tensor<f64>> = (0..2).map(|_| rand_mat(2, 3, &mut rng)).collect();
        let y = attn_resformer(&x, &bank, &w, 0.5).unwrap();
        // Oracle: average local values with the bank explicitly.
        let v = matmul(w.w_v.as_ref().unwrap(), &x).unwrap();
        let mut v_full = Tensor::zeros(vec![4, 3]);
        for hd in 0..2 {
            for r in 0..2 {
                for j in 0..3 {
                    *v_full.at_mut(hd * 2 + r, j) =
                        0.5 * v.at(hd * 2 + r, j) + 0.5 * bank[hd].at(r, j);
                }
            }
        }
        let expect = dense_attention_oracle(&x, &w, &v_full);
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn gqa_one_head_per_group_equals_mha() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = mha_weights(4, 2, &mut rng);
        let x = rand_mat(4, 3, &mut rng);
        let (y_mha, _) = attn_mha(&x, &w).unwrap();
        let y = attn_gqa(&x, &w, 2, false, None).unwrap();
        for (a, b) in y.data().iter().zip(y_mha.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gqa_skip_degenerate_grouping_equals_skipv1() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = 4;
        let h = 2;
        let full = mha_weights(d, h, &mut rng);
        let bank: Vec<Tensor<f64>> = (0..h).map(|_| rand_mat(2, 3, &mut rng)).collect();
        let x = rand_mat(d, 3, &mut rng);
        let local_wv =
            Tensor::new(vec![2, d], full.w_v.as_ref().unwrap().data()[..2 * d].to_vec()).unwrap();
        let mut w = full.clone();
        w.w_v = Some(local_wv);
        let map = select_skip_heads(h, 0.5, 2, HeadInjection::SecondHalf).unwrap();
        let expect = attn_skipv1(&x, &bank, &w, &map).unwrap();
        let y = attn_gqa(&x, &w, h, true, Some(&bank)).unwrap();
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gqa_matches_duplication_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 8;
        let h = 4;
        let groups = 2;
        let d_h = d / h;
        let w = AttnWeights {
            heads: h,
            d_h,
            w_q: rand_mat(d, d, &mut rng),
            w_k: Some(rand_mat(groups * d_h, d, &mut rng)),
            w_v: Some(rand_mat(groups * d_h, d, &mut rng)),
            w_o: rand_mat(d, d, &mut rng),
        };
        let x = rand_mat(d, 3, &mut rng);
        let y = attn_gqa(&x, &w, groups, false, None).unwrap();

        // Oracle: duplicate each group's K/V across its query heads, run MHA.
        let dup = |m: &Tensor<f64>| {
            let mut out = Tensor::zeros(vec![d, d]);
            for head in 0..h {
                let g = head / (h / groups);
                for r in 0..d_h {
                    for c in 0..d {
                        *out.at_mut(head * d_h + r, c) = m.at(g * d_h + r, c);
                    }
                }
            }
            out
        };
        let w_full = AttnWeights {
            heads: h,
            d_h,
            w_q: w.w_q.clone(),
            w_k: Some(dup(w.w_k.as_ref().unwrap())),
            w_v: Some(dup(w.w_v.as_ref().unwrap())),
            w_o: w.w_o.clone(),
        };
        let (expect, _) = attn_mha(&x, &w_full).unwrap();
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn gqa_rejects_bad_group_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = mha_weights(4, 2, &mut rng);
        let x = rand_mat(4, 2, &mut rng);
        assert!(attn_gqa(&x, &w, 3, false, None).is_err());
    }

    fn mla_weights(d: usize, d_c: usize, d_r: usize, rng: &mut ChaCha8Rng) -> MlaWeights<f64> {
        MlaWeights {
            d_c,
            d_r,
            w_q: rand_mat(d, d, rng),
            w_qr: (d_r > 0).then(|| rand_mat(d_r, d, rng)),
            w_dkv: rand_mat(d_c, d, rng),
            w_uk: rand_mat(d, d_c, rng),
            w_uv: rand_mat(d, d_c, rng),
            w_kr: (d_r > 0).then(|| rand_mat(d_r, d, rng)),
            w_o: rand_mat(d, d, rng),
        }
    }

    #[test]
    fn mla_uncompressed_limit_equals_single_head_shared_kv() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = 4;
        let mut w = mla_weights(d, d, 0, &mut rng);
        let mut eye = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            *eye.at_mut(i, i) = 1.0;
        }
        w.w_uk = eye.clone();
        w.w_uv = eye;
        let x = rand_mat(d, 3, &mut rng);
        let (y, _) = attn_mla(&x, &w, false, None).unwrap();

        let w_mha = AttnWeights {
            heads: 1,
            d_h: d,
            w_q: w.w_q.clone(),
            w_k: Some(w.w_dkv.clone()),
            w_v: Some(w.w_dkv.clone()),
            w_o: w.w_o.clone(),
        };
        let (expect, _) = attn_mha(&x, &w_mha).unwrap();
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mla_skip_with_own_latent_bank_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let d = 8;
        let d_c = 4;
        let w = mla_weights(d, d_c, 2, &mut rng);
        let x = rand_mat(d, 3, &mut rng);
        let (y_plain, latent) = attn_mla(&x, &w, false, None).unwrap();

        let mut w_half = w.clone();
        w_half.w_dkv =
            Tensor::new(vec![d_c / 2, d], w.w_dkv.data()[..(d_c / 2) * d].to_vec()).unwrap();
        let (y_skip, _) = attn_mla(&x, &w_half, true, Some(&latent)).unwrap();
        for (a, b) in y_skip.data().iter().zip(y_plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mla_matches_materialization_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let d = 8;
        let (d_c, d_r) = (4, 2);
        let w = mla_weights(d, d_c, d_r, &mut rng);
        let x = rand_mat(d, 3, &mut rng);
        let (y, _) = attn_mla(&x, &w, false, None).unwrap();

        // Oracle: materialize K and V explicitly, dense single-head attention.
        let c = matmul(&w.w_dkv, &x).unwrap();
        let k_c = matmul(&w.w_uk, &c).unwrap();
        let v = matmul(&w.w_uv, &c).unwrap();
        let k_r = crate::tape::rope_forward(
            &matmul(w.w_kr.as_ref().unwrap(), &x).unwrap(),
            0,
            10000.0,
        )
        .unwrap();
        let q_r = crate::tape::rope_forward(
            &matmul(w.w_qr.as_ref().unwrap(), &x).unwrap(),
            0,
            10000.0,
        )
        .unwrap();
        let q_c = matmul(&w.w_q, &x).unwrap();
        let mut k = Tensor::zeros(vec![d + d_r, 3]);
        let mut q = Tensor::zeros(vec![d + d_r, 3]);
        for j in 0..3 {
            for r in 0..d_r {
                *k.at_mut(r, j) = k_r.at(r, j);
                *q.at_mut(r, j) = q_r.at(r, j);
            }
            for r in 0..d {
                *k.at_mut(d_r + r, j) = k_c.at(r, j);
                *q.at_mut(d_r + r, j) = q_c.at(r, j);
            }
        }
        let scores = matmul(&transpose(&k), &q).unwrap();
        let weights =
            crate::tensor::causal_softmax(&scores, 1.0 / ((d + d_r) as f64).sqrt()).unwrap();
        let mixed = matmul(&v, &weights).unwrap();
        let expect = add(&x, &matmul(&w.w_o, &mixed).unwrap()).unwrap();
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn mla_odd_latent_with_skip_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let w = mla_weights(6, 3, 0, &mut rng);
        let x = rand_mat(6, 2, &mut rng);
        let bank = rand_mat(3, 2, &mut rng);
        assert!(attn_mla(&x, &w, true, Some(&bank)).is_err());
    }

    #[test]
    fn cross_kv_local_sources_equal_mha() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = mha_weights(4, 2, &mut rng);
        let x = rand_mat(4, 3, &mut rng);
        let (y_mha, _) = attn_mha(&x, &w).unwrap();
        let k = matmul(w.w_k.as_ref().unwrap(), &x).unwrap();
        let v = matmul(w.w_v.as_ref().unwrap(), &x).unwrap();
        let take = |m: &Tensor<f64>, head: usize| {
            Tensor::new(
                vec![2, 3],
                (0..6).map(|idx| m.at(head * 2 + idx / 3, idx % 3)).collect::<Vec<_>>(),
            )
            .unwrap()
        };
        let ks: Vec<_> = (0..2).map(|h| take(&k, h)).collect();
        let vs: Vec<_> = (0..2).map(|h| take(&v, h)).collect();
        let y = attn_cross_kv(&x, &w, Some(&ks), Some(&vs)).unwrap();
        for (a, b) in y.data().iter().zip(y_mha.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_kv_rejects_wrong_length_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let w = mha_weights(4, 2, &mut rng);
        let x = rand_mat(4, 3, &mut rng);
        let bad = vec![rand_mat(2, 5, &mut rng), rand_mat(2, 5, &mut rng)];
        assert!(attn_cross_kv(&x, &w, None, Some(&bad)).is_err());
    }

    #[test]
    fn second_half_mapping_is_layer_independent() {
        // H=12, ratio=0.5: local {0..5}, skip {6..11} for every layer.
        for layer in 2..6 {
            let map = select_skip_heads(12, 0.5, layer, HeadInjection::SecondHalf).unwrap();
            for (p, slot) in map.slots.iter().enumerate() {
                if p < 6 {
                    assert_eq!(*slot, HeadSource::Local(p));
                } else {
                    assert_eq!(*slot, HeadSource::Bank(p));
                }
            }
        }
    }

    #[test]
    fn ratio_zero_is_all_local() {
        let map = select_skip_heads(8, 0.0, 2, HeadInjection::SecondHalf).unwrap();
        assert_eq!(map, HeadMap::all_local(8));
    }

    #[test]
    fn dynamic_rotation_enumeration() {
        // H=4, layer=3: bank head (3+j) mod 4 goes to slot (3+j+2) mod 4.
        // j=0: bank 3 -> slot 1; j=1: bank 0 -> slot 2.
        let map = select_skip_heads(4, 0.5, 3, HeadInjection::Dynamic).unwrap();
        assert_eq!(map.slots[1], HeadSource::Bank(3));
        assert_eq!(map.slots[2], HeadSource::Bank(0));
        assert_eq!(map.slots[0], HeadSource::Local(0));
        assert_eq!(map.slots[3], HeadSource::Local(1));
    }

    #[test]
    fn odd_even_alternates_bank_halves() {
        let odd = select_skip_heads(4, 0.5, 3, HeadInjection::OddEven).unwrap();
        assert_eq!(odd.slots[2], HeadSource::Bank(0));
        assert_eq!(odd.slots[3], HeadSource::Bank(1));
        let even = select_skip_heads(4, 0.5, 4, HeadInjection::OddEven).unwrap();
        assert_eq!(even.slots[2], HeadSource::Bank(2));
        assert_eq!(even.slots[3], HeadSource::Bank(3));
    }

    #[test]
    fn invalid_ratio_is_rejected() {
        assert!(select_skip_heads(4, 1.0, 2, HeadInjection::SecondHalf).is_err());
        assert!(select_skip_heads(4, -0.1, 2, HeadInjection::SecondHalf).is_err());
    }

    #[test]
    fn per_head_decomposition_holds() {
        // Output equals residual plus the sum of per-head contributions
        // computed in isolation.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let d = 6;
        let h = 3;
        let w = mha_weights(d, h, &mut rng);
        let x = rand_mat(d, 4, &mut rng);
        let (y, _) = attn_mha(&x, &w).unwrap();
        let mut acc = x.clone();
        for head in 0..h {
            let mut w_iso = w.clone();
            let mut wo = Tensor::zeros(vec![d, d]);
            for r in 0..d {
                for c in head * 2..(head + 1) * 2 {
                    *wo.at_mut(r, c) = w.w_o.at(r, c);
                }
            }
            w_iso.w_o = wo;
            let (y_head, _) = attn_mha(&x, &w_iso).unwrap();
            for idx in 0..acc.len() {
                acc.data_mut()[idx] += y_head.data()[idx] - x.data()[idx];
            }
        }
        for (a, b) in y.data().iter().zip(acc.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
