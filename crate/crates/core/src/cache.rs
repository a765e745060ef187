//! Incremental decoding cache and exact bytes-per-token accounting.
//!
//! The decode state keeps two kinds of buffers: per-layer K and local-V
//! buffers, plus a single layer-1 skip-V buffer shared by every consuming
//! layer. Each step appends one column per buffer; deeper layers assemble
//! their values by stitching local half-heads with the cached layer-1
//! half-heads along the head axis. Byte accounting is analytic and never
//! reads allocator state.

use thiserror::Error;

use crate::attn::{select_skip_heads, HeadSource};
use crate::config::{mla_latent_rows, ModelConfig, Positional, VariantKind};
use crate::model::{wk_rows, wv_rows, Checkpoint, ModelError, LN_EPS};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache was built for a different model config")]
    ConfigMismatch,
    #[error("cache is full: length {len} at maximum {n_max}")]
    Full { len: usize, n_max: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

// ── Analytic accounting ─────────────────────────────────────────────────────

/// How the latent-skip composition counts layer 1.
///
/// `Uniform` charges every layer the halved latent (the reference per-token
/// figures); `Layer1Full` charges layer 1 its physically cached full latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MlaAccounting {
    #[default]
    Uniform,
    Layer1Full,
}

/// Per-layer cached element counts per generated token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCount {
    pub k_elems: usize,
    pub v_elems: usize,
}

/// Cache accounting derived from a model config.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheSpec {
    pub variant: String,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub elem_bytes: usize,
    pub per_layer: Vec<LayerCount>,
    /// Layer-1 skip-value elements added per token (single buffer).
    pub bank_elems: usize,
    pub mla_mode: MlaAccounting,
}

impl CacheSpec {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self::with_mode(cfg, MlaAccounting::default())
    }

    pub fn with_mode(cfg: &ModelConfig, mode: MlaAccounting) -> Self {
        let d_h = cfg.head_dim();
        let mut per_layer = Vec::with_capacity(cfg.layers);
        let mut bank_elems = 0;
        for l in 1..=cfg.layers {
            let (k_elems, v_elems) = match cfg.variant {
                VariantKind::Mla { d_c, d_r } => (d_r, d_c),
                VariantKind::SkipV1Mla { d_c, d_r } => {
                    let latent = match mode {
                        MlaAccounting::Uniform => d_c / 2,
                        MlaAccounting::Layer1Full => mla_latent_rows(cfg, l),
                    };
                    (d_r, latent)
                }
                _ => {
                    let k = wk_rows(cfg, l);
                    let mut v = wv_rows(cfg, l);
                    if l == 1 {
                        // Layer 1's skip heads live in the shared bank buffer.
                        bank_elems = bank_heads(cfg) * d_h;
                        v -= bank_elems;
                    }
                    (k, v)
                }
            };
            per_layer.push(LayerCount { k_elems, v_elems });
        }
        CacheSpec {
            variant: cfg.variant.name().to_string(),
            layers: cfg.layers,
            dim: cfg.dim,
            heads: cfg.heads,
            elem_bytes: cfg.elem_bytes,
            per_layer,
            bank_elems,
            mla_mode: mode,
        }
    }

    /// Cached elements added per generated token.
    pub fn elems_per_token(&self) -> u64 {
        let layer_sum: u64 = self
            .per_layer
            .iter()
            .map(|c| (c.k_elems + c.v_elems) as u64)
            .sum();
        layer_sum + self.bank_elems as u64
    }

    pub fn total_bytes(&self, seq_len: u64) -> u64 {
        bytes_per_token(self) * seq_len
    }
}

/// Skip heads whose layer-1 values live in the shared bank buffer.
fn bank_heads(cfg: &ModelConfig) -> usize {
    match cfg.variant {
        VariantKind::SkipV1 | VariantKind::SkipV1Yoco => cfg.heads - cfg.local_heads(),
        VariantKind::SkipV1Gqa { groups } => groups - cfg.local_groups(groups),
        _ => 0,
    }
}

/// Exact cached bytes added per generated token.
pub fn bytes_per_token(spec: &CacheSpec) -> u64 {
    spec.elems_per_token() * spec.elem_bytes as u64
}

/// CSV cache report: one row per (spec, seq_len), linear in length.
/// Header: `variant,L,d,H,elem_bytes,seq_len,kv_bytes_total,kv_bytes_per_token`.
pub fn cache_report(specs: &[CacheSpec], seq_lens: &[u64]) -> String {
    let mut out = String::from("variant,L,d,H,elem_bytes,seq_len,kv_bytes_total,kv_bytes_per_token\n");
    for spec in specs {
        let bpt = bytes_per_token(spec);
        for &len in seq_lens {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                spec.variant,
                spec.layers,
                spec.dim,
                spec.heads,
                spec.elem_bytes,
                len,
                bpt * len,
                bpt
            ));
        }
    }
    out
}

// ── Decode state ────────────────────────────────────────────────────────────

/// Column-appended buffer: `rows x t`, one column per decoded token.
#[derive(Debug, Clone, PartialEq)]
pub struct Buf {
    rows: usize,
    data: Vec<f32>,
}

impl Buf {
    fn new(rows: usize) -> Self {
        Self { rows, data: Vec::new() }
    }

    fn push_col(&mut self, col: &[f32]) {
        debug_assert_eq!(col.len(), self.rows);
        self.data.extend_from_slice(col);
    }

    pub fn col(&self, i: usize) -> &[f32] {
        &self.data[i * self.rows..(i + 1) * self.rows]
    }

    pub fn len_cols(&self) -> usize {
        if self.rows == 0 {
            0
        } else {
            self.data.len() / self.rows
        }
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
struct LayerCache {
    /// Per K head/group buffers (empty when keys are reused).
    k: Vec<Buf>,
    /// Per local value head/group buffers.
    v: Vec<Buf>,
    /// Latent rows cached by this layer.
    latent: Option<Buf>,
    /// Rotary key buffer.
    kr: Option<Buf>,
}

/// Two-buffer incremental decoding state.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeCache {
    cfg: ModelConfig,
    len: usize,
    layers: Vec<LayerCache>,
    /// Single layer-1 skip-value buffer, one Buf per skip head.
    bank_v: Vec<Buf>,
}

impl DecodeCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d_h = cfg.head_dim();
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 1..=cfg.layers {
            let mut lc = LayerCache::default();
            match cfg.variant {
                VariantKind::Mla { d_r, .. } | VariantKind::SkipV1Mla { d_r, .. } => {
                    lc.latent = Some(Buf::new(mla_latent_rows(cfg, l)));
                    if d_r > 0 {
                        lc.kr = Some(Buf::new(d_r));
                    }
                }
                _ => {
                    let k_bufs = wk_rows(cfg, l) / d_h;
                    lc.k = (0..k_bufs).map(|_| Buf::new(d_h)).collect();
                    let mut v_bufs = wv_rows(cfg, l) / d_h;
                    if l == 1 {
                        v_bufs -= bank_heads(cfg);
                    }
                    lc.v = (0..v_bufs).map(|_| Buf::new(d_h)).collect();
                }
            }
            layers.push(lc);
        }
        let bank_v = (0..bank_heads(cfg)).map(|_| Buf::new(d_h)).collect();
        DecodeCache { cfg: cfg.clone(), len: 0, layers, bank_v }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Actual cached scalars across all buffers.
    pub fn cached_elements(&self) -> u64 {
        let mut total = 0u64;
        for lc in &self.layers {
            for b in &lc.k {
                total += b.data.len() as u64;
            }
            for b in &lc.v {
                total += b.data.len() as u64;
            }
            if let Some(b) = &lc.latent {
                total += b.data.len() as u64;
            }
            if let Some(b) = &lc.kr {
                total += b.data.len() as u64;
            }
        }
        for b in &self.bank_v {
            total += b.data.len() as u64;
        }
        total
    }

    /// Raw bank contents, for write-once checks.
    pub fn bank_snapshot(&self) -> Vec<Vec<f32>> {
        self.bank_v.iter().map(|b| b.data.clone()).collect()
    }
}

// ── Small dense helpers (decode works on plain slices) ─────────────────────

fn matvec(mat: &Tensor<f32>, x: &[f32]) -> Vec<f32> {
    let (r, c) = (mat.rows(), mat.cols());
    debug_assert_eq!(c, x.len());
    let mut out = vec![0.0f32; r];
    let data = mat.data();
    for i in 0..r {
        let row = &data[i * c..(i + 1) * c];
        let mut acc = 0.0f32;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        out[i] = acc;
    }
    out
}

fn layer_norm_vec(x: &[f32], gain: &[f32], bias: &[f32]) -> Vec<f32> {
    let d = x.len();
    let mean = x.iter().sum::<f32>() / d as f32;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
    let inv_std = 1.0 / (var + LN_EPS as f32).sqrt();
    (0..d)
        .map(|i| (x[i] - mean) * inv_std * gain[i] + bias[i])
        .collect()
}

fn rope_col(col: &mut [f32], pos: usize) {
    let k = col.len();
    for p in 0..k / 2 {
        let omega = 10000f64.powf(-2.0 * p as f64 / k as f64);
        let theta = pos as f64 * omega;
        let (sin, cos) = (theta.sin() as f32, theta.cos() as f32);
        let x0 = col[2 * p];
        let x1 = col[2 * p + 1];
        col[2 * p] = x0 * cos - x1 * sin;
        col[2 * p + 1] = x0 * sin + x1 * cos;
    }
}

/// Value column provider for one head slot at one layer.
enum VSlot<'a> {
    One(&'a Buf),
    Avg(&'a Buf, &'a Buf),
    Mix(&'a Buf, &'a Buf, f32),
}

impl<'a> VSlot<'a> {
    fn col(&self, i: usize, out: &mut [f32]) {
        match self {
            VSlot::One(b) => out.copy_from_slice(b.col(i)),
            VSlot::Avg(a, b) => {
                for (o, (x, y)) in out.iter_mut().zip(a.col(i).iter().zip(b.col(i))) {
                    *o = 0.5 * (x + y);
                }
            }
            VSlot::Mix(a, b, lam) => {
                for (o, (x, y)) in out.iter_mut().zip(a.col(i).iter().zip(b.col(i))) {
                    *o = lam * x + (1.0 - lam) * y;
                }
            }
        }
    }
}

/// Softmax-attend one query against a key buffer and a value slot; adds
/// `W_O` block times the mixed value into `y`.
#[allow(clippy::too_many_arguments)]
fn attend_slot(
    q: &[f32],
    kbuf: &Buf,
    vslot: &VSlot,
    w_o: &Tensor<f32>,
    o_col0: usize,
    scale: f32,
    t_len: usize,
    y: &mut [f32],
) {
    let d_h = q.len();
    let mut scores = Vec::with_capacity(t_len);
    for i in 0..t_len {
        let k = kbuf.col(i);
        let mut s = 0.0f32;
        for r in 0..d_h {
            s += k[r] * q[r];
        }
        scores.push(s * scale);
    }
    let m = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut denom = 0.0f32;
    for s in scores.iter_mut() {
        *s = (*s - m).exp();
        denom += *s;
    }
    let mut mixed = vec![0.0f32; vslot_rows(vslot)];
    let mut vc = vec![0.0f32; mixed.len()];
    for (i, w) in scores.iter().enumerate() {
        vslot.col(i, &mut vc);
        let wn = w / denom;
        for (mx, v) in mixed.iter_mut().zip(&vc) {
            *mx += wn * v;
        }
    }
    let d = y.len();
    let wo = w_o.data();
    let cols = w_o.cols();
    for r in 0..d {
        let row = &wo[r * cols..(r + 1) * cols];
        let mut acc = 0.0f32;
        for (j, v) in mixed.iter().enumerate() {
            acc += row[o_col0 + j] * v;
        }
        y[r] += acc;
    }
}

fn vslot_rows(v: &VSlot) -> usize {
    match v {
        VSlot::One(b) => b.rows,
        VSlot::Avg(a, _) | VSlot::Mix(a, _, _) => a.rows,
    }
}

/// Resolve a bank head index to its physical buffer: layer 1 keeps heads
/// `0..H'` in its local buffers and `H'..H` in the shared bank.
fn bank_buf<'a>(
    layers: &'a [LayerCache],
    bank_v: &'a [Buf],
    local_in_l1: usize,
    head: usize,
) -> &'a Buf {
    if head < local_in_l1 {
        &layers[0].v[head]
    } else {
        &bank_v[head - local_in_l1]
    }
}

/// One incremental decoding step: appends the token's K/V (and bank
/// contribution while layer 1 executes), assembles per-layer values by
/// stitching local heads with cached layer-1 heads, and returns the
/// next-token logits. Cache length advances by one.
pub fn decode_step(
    ck: &Checkpoint,
    cache: &mut DecodeCache,
    token: usize,
) -> Result<Vec<f32>, CacheError> {
    let cfg = &ck.config;
    if cache.cfg != *cfg {
        return Err(CacheError::ConfigMismatch);
    }
    let t = cache.len;
    if t >= cfg.n_max {
        return Err(CacheError::Full { len: t, n_max: cfg.n_max });
    }
    if token >= cfg.vocab {
        return Err(CacheError::Model(ModelError::TokenOutOfRange {
            id: token,
            vocab: cfg.vocab,
        }));
    }

    let d = cfg.dim;
    let d_h = cfg.head_dim();
    let heads = cfg.heads;
    let half = cfg.layers / 2;
    let rotary = cfg.positional == Positional::Rotary && !cfg.variant.is_mla();

    let tensor = |name: &str| -> Result<&Tensor<f32>, CacheError> {
        ck.tensors
            .get(name)
            .ok_or_else(|| CacheError::Model(ModelError::MissingTensor(name.to_string())))
    };

    // Embed the token (+ learned position).
    let embed = tensor("embed")?;
    let mut x: Vec<f32> = (0..d).map(|i| embed.at(i, token)).collect();
    if cfg.positional == Positional::Learned && !cfg.variant.is_mla() {
        let pos = tensor("pos")?;
        for (i, v) in x.iter_mut().enumerate() {
            *v += pos.at(i, t);
        }
    }

    let l1_local_bufs = cache.layers[0].v.len();

    for l in 1..=cfg.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        let ln1g = tensor(&p("ln1.gain"))?.data().to_vec();
        let ln1b = tensor(&p("ln1.bias"))?.data().to_vec();
        let h = layer_norm_vec(&x, &ln1g, &ln1b);

        let mut y = vec![0.0f32; d];
        match cfg.variant {
            VariantKind::Mla { d_c, d_r } | VariantKind::SkipV1Mla { d_c, d_r } => {
                let skip = matches!(cfg.variant, VariantKind::SkipV1Mla { .. }) && l > 1;
                // Append latent and rotary-key columns.
                let own = matvec(tensor(&p("attn.w_dkv"))?, &h);
                if d_r > 0 {
                    let mut kr = matvec(tensor(&p("attn.w_kr"))?, &h);
                    rope_col(&mut kr, t);
                    cache.layers[l - 1].kr.as_mut().expect("kr buf").push_col(&kr);
                }
                cache.layers[l - 1].latent.as_mut().expect("latent buf").push_col(&own);

                let q_c = matvec(tensor(&p("attn.w_q"))?, &h);
                let q_r = if d_r > 0 {
                    let mut q = matvec(tensor(&p("attn.w_qr"))?, &h);
                    rope_col(&mut q, t);
                    q
                } else {
                    Vec::new()
                };
                let w_uk = tensor(&p("attn.w_uk"))?;
                let w_uv = tensor(&p("attn.w_uv"))?;
                let w_o = tensor(&p("attn.w_o"))?;
                let scale = 1.0 / ((d + d_r) as f64).sqrt() as f32;

                // Assemble latent columns and attend.
                let own_buf = cache.layers[l - 1].latent.as_ref().expect("latent buf");
                let l1_buf = cache.layers[0].latent.as_ref().expect("layer1 latent");
                let kr_buf = cache.layers[l - 1].kr.as_ref();
                let mut scores = Vec::with_capacity(t + 1);
                let mut c_i = vec![0.0f32; d_c];
                let mut values: Vec<Vec<f32>> = Vec::with_capacity(t + 1);
                for i in 0..=t {
                    if skip {
                        c_i[..d_c / 2].copy_from_slice(own_buf.col(i));
                        c_i[d_c / 2..].copy_from_slice(&l1_buf.col(i)[d_c / 2..]);
                    } else {
                        c_i.copy_from_slice(own_buf.col(i));
                    }
                    let k_c = matvec(w_uk, &c_i);
                    let mut s = 0.0f32;
                    for r in 0..d {
                        s += k_c[r] * q_c[r];
                    }
                    if d_r > 0 {
                        let kr = kr_buf.expect("kr buf").col(i);
                        for r in 0..d_r {
                            s += kr[r] * q_r[r];
                        }
                    }
                    scores.push(s * scale);
                    values.push(matvec(w_uv, &c_i));
                }
                let m = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut denom = 0.0f32;
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    denom += *s;
                }
                let mut mixed = vec![0.0f32; d];
                for (i, w) in scores.iter().enumerate() {
                    let wn = w / denom;
                    for (mx, v) in mixed.iter_mut().zip(&values[i]) {
                        *mx += wn * v;
                    }
                }
                for r in 0..d {
                    let row = &w_o.data()[r * d..(r + 1) * d];
                    let mut acc = 0.0f32;
                    for (j, v) in mixed.iter().enumerate() {
                        acc += row[j] * v;
                    }
                    y[r] += acc;
                }
            }
            _ => {
                // Project the new token's q, k, v and append columns.
                let q_all = {
                    let mut q = matvec(tensor(&p("attn.w_q"))?, &h);
                    if rotary {
                        for head in 0..heads {
                            rope_col(&mut q[head * d_h..(head + 1) * d_h], t);
                        }
                    }
                    q
                };
                if wk_rows(cfg, l) > 0 {
                    let mut k_all = matvec(tensor(&p("attn.w_k"))?, &h);
                    let k_bufs = wk_rows(cfg, l) / d_h;
                    if rotary {
                        for b in 0..k_bufs {
                            rope_col(&mut k_all[b * d_h..(b + 1) * d_h], t);
                        }
                    }
                    for b in 0..k_bufs {
                        cache.layers[l - 1].k[b].push_col(&k_all[b * d_h..(b + 1) * d_h]);
                    }
                }
                if wv_rows(cfg, l) > 0 {
                    let v_all = matvec(tensor(&p("attn.w_v"))?, &h);
                    let blocks = wv_rows(cfg, l) / d_h;
                    if l == 1 {
                        let local = l1_local_bufs;
                        for b in 0..blocks {
                            let col = &v_all[b * d_h..(b + 1) * d_h];
                            if b < local {
                                cache.layers[0].v[b].push_col(col);
                            } else {
                                cache.bank_v[b - local].push_col(col);
                            }
                        }
                    } else {
                        for b in 0..blocks {
                            cache.layers[l - 1].v[b].push_col(&v_all[b * d_h..(b + 1) * d_h]);
                        }
                    }
                }

                // Per-slot K buffer and value source.
                let w_o = tensor(&p("attn.w_o"))?;
                let scale = 1.0 / (d_h as f64).sqrt() as f32;
                let layers = &cache.layers;
                let bank = &cache.bank_v;
                let this = &layers[l - 1];
                let groups_of = |g: usize| heads / g;

                for slot in 0..heads {
                    let (kbuf, vslot): (&Buf, VSlot) = match cfg.variant {
                        VariantKind::Mha => (&this.k[slot], VSlot::One(&this.v[slot])),
                        VariantKind::SkipV1 | VariantKind::ResFormer { .. } => {
                            if l == 1 {
                                let v = if slot < this.v.len() {
                                    VSlot::One(&this.v[slot])
                                } else {
                                    VSlot::One(&bank[slot - this.v.len()])
                                };
                                (&this.k[slot], v)
                            } else {
                                let map = match cfg.variant {
                                    VariantKind::ResFormer { lambda } => {
                                        crate::attn::HeadMap {
                                            slots: (0..heads)
                                                .map(|i| HeadSource::LocalBankMix {
                                                    local: i,
                                                    bank: i,
                                                    lambda,
                                                })
                                                .collect(),
                                        }
                                    }
                                    _ => select_skip_heads(
                                        heads,
                                        cfg.skip_ratio,
                                        l,
                                        cfg.injection,
                                    )
                                    .map_err(ModelError::from)?,
                                };
                                let v = match map.slots[slot] {
                                    HeadSource::Local(i) => VSlot::One(&this.v[i]),
                                    HeadSource::Bank(b) => {
                                        VSlot::One(bank_buf(layers, bank, l1_local_bufs, b))
                                    }
                                    HeadSource::BankAvg(a, b) => VSlot::Avg(
                                        bank_buf(layers, bank, l1_local_bufs, a),
                                        bank_buf(layers, bank, l1_local_bufs, b),
                                    ),
                                    HeadSource::LocalBankMix { local, bank: b, lambda } => {
                                        VSlot::Mix(
                                            &this.v[local],
                                            bank_buf(layers, bank, l1_local_bufs, b),
                                            lambda as f32,
                                        )
                                    }
                                };
                                (&this.k[slot], v)
                            }
                        }
                        VariantKind::Gqa { groups } => {
                            let g = slot / groups_of(groups);
                            (&this.k[g], VSlot::One(&this.v[g]))
                        }
                        VariantKind::SkipV1Gqa { groups } => {
                            let g = slot / groups_of(groups);
                            let v = if l == 1 {
                                if g < this.v.len() {
                                    VSlot::One(&this.v[g])
                                } else {
                                    VSlot::One(&bank[g - this.v.len()])
                                }
                            } else {
                                let local_groups = cfg.local_groups(groups);
                                if g < local_groups {
                                    VSlot::One(&this.v[g])
                                } else {
                                    VSlot::One(bank_buf(layers, bank, l1_local_bufs, g))
                                }
                            };
                            (&this.k[g], v)
                        }
                        VariantKind::YocoV => {
                            if l <= half {
                                (&this.k[slot], VSlot::One(&this.v[slot]))
                            } else {
                                (&this.k[slot], VSlot::One(&layers[half - 1].v[slot]))
                            }
                        }
                        VariantKind::ClaV { period } => {
                            if cfg.cla_computes(l, period) {
                                (&this.k[slot], VSlot::One(&this.v[slot]))
                            } else {
                                let src = l - 1 - (l - 1) % period;
                                (&this.k[slot], VSlot::One(&layers[src].v[slot]))
                            }
                        }
                        VariantKind::SkipKv1 => {
                            if l == 1 {
                                (&this.k[slot], VSlot::One(&this.v[slot]))
                            } else {
                                (&layers[0].k[slot], VSlot::One(&layers[0].v[slot]))
                            }
                        }
                        VariantKind::SkipV1Yoco => {
                            let kbuf = if l <= half { &this.k[slot] } else { &layers[half - 1].k[slot] };
                            let v = if l == 1 {
                                if slot < this.v.len() {
                                    VSlot::One(&this.v[slot])
                                } else {
                                    VSlot::One(&bank[slot - this.v.len()])
                                }
                            } else {
                                let map = select_skip_heads(heads, cfg.skip_ratio, l, cfg.injection)
                                    .map_err(ModelError::from)?;
                                match map.slots[slot] {
                                    HeadSource::Local(i) => VSlot::One(&this.v[i]),
                                    HeadSource::Bank(b) => {
                                        VSlot::One(bank_buf(layers, bank, l1_local_bufs, b))
                                    }
                                    _ => unreachable!("second-half mapping"),
                                }
                            };
                            (kbuf, v)
                        }
                        VariantKind::Mla { .. } | VariantKind::SkipV1Mla { .. } => unreachable!(),
                    };
                    attend_slot(
                        &q_all[slot * d_h..(slot + 1) * d_h],
                        kbuf,
                        &vslot,
                        w_o,
                        slot * d_h,
                        scale,
                        t + 1,
                        &mut y,
                    );
                }
            }
        }

        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi += yi;
        }

        // FFN.
        let ln2g = tensor(&p("ln2.gain"))?.data().to_vec();
        let ln2b = tensor(&p("ln2.bias"))?.data().to_vec();
        let h2 = layer_norm_vec(&x, &ln2g, &ln2b);
        let mut f1 = matvec(tensor(&p("ffn.w1"))?, &h2);
        for v in f1.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let f2 = matvec(tensor(&p("ffn.w2"))?, &f1);
        for (xi, fi) in x.iter_mut().zip(&f2) {
            *xi += fi;
        }
    }

    let gf = tensor("ln_f.gain")?.data().to_vec();
    let bf = tensor("ln_f.bias")?.data().to_vec();
    let hf = layer_norm_vec(&x, &gf, &bf);
    let mut logits = vec![0.0f32; cfg.vocab];
    for (v, logit) in logits.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for i in 0..d {
            acc += embed.at(i, v) * hf[i];
        }
        *logit = acc;
    }

    cache.len = t + 1;
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn::HeadInjection;
    use crate::model::init_weights;

    fn table3_config(variant: VariantKind, elem_bytes: usize) -> ModelConfig {
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

    #[test]
    fn grouped_kv_bytes_per_token() {
        let spec = CacheSpec::from_config(&table3_config(VariantKind::Gqa { groups: 8 }, 4));
        assert_eq!(bytes_per_token(&spec), 98_304);
    }

    #[test]
    fn grouped_skip_bytes_per_token() {
        let spec = CacheSpec::from_config(&table3_config(VariantKind::SkipV1Gqa { groups: 8 }, 4));
        // 49,152 (K) + 23 x 1,024 (halved V) + 2,048 (layer-1 V) = 74,752.
        assert_eq!(bytes_per_token(&spec), 74_752);
    }

    #[test]
    fn latent_bytes_per_token() {
        let spec = CacheSpec::from_config(&table3_config(VariantKind::Mla { d_c: 256, d_r: 32 }, 2));
        assert_eq!(bytes_per_token(&spec), 13_824);
    }

    #[test]
    fn latent_skip_bytes_both_modes() {
        let cfg = table3_config(VariantKind::SkipV1Mla { d_c: 256, d_r: 32 }, 2);
        let uniform = CacheSpec::from_config(&cfg);
        assert_eq!(bytes_per_token(&uniform), 7_680);
        let full = CacheSpec::with_mode(&cfg, MlaAccounting::Layer1Full);
        assert_eq!(bytes_per_token(&full), 7_936);
    }

    #[test]
    fn value_skip_slope_ratio_is_exact() {
        // Plain value-skip vs MHA per-token ratio = (3L + 1) / (4L).
        for layers in [2usize, 12, 24, 32] {
            let mut cfg = table3_config(VariantKind::Mha, 2);
            cfg.layers = layers;
            let mha = bytes_per_token(&CacheSpec::from_config(&cfg));
            cfg.variant = VariantKind::SkipV1;
            let skip = bytes_per_token(&CacheSpec::from_config(&cfg));
            assert_eq!(
                skip as u128 * (4 * layers as u128),
                mha as u128 * (3 * layers as u128 + 1),
                "L = {layers}"
            );
        }
    }

    #[test]
    fn report_is_linear_and_zero_at_zero() {
        let cfg = table3_config(VariantKind::SkipV1, 2);
        let spec = CacheSpec::from_config(&cfg);
        assert_eq!(spec.total_bytes(0), 0);
        assert_eq!(spec.total_bytes(2048), 2 * spec.total_bytes(1024));
        let csv = cache_report(&[spec], &[0, 128]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "variant,L,d,H,elem_bytes,seq_len,kv_bytes_total,kv_bytes_per_token"
        );
        assert!(lines.next().unwrap().starts_with("skipv1,24,1024,16,2,0,0,"));
    }

    fn decode_all(ck: &Checkpoint, tokens: &[usize]) -> (Vec<f32>, DecodeCache) {
        let mut cache = DecodeCache::new(&ck.config);
        let mut last = Vec::new();
        for &t in tokens {
            last = decode_step(ck, &mut cache, t).unwrap();
        }
        (last, cache)
    }

    fn small_config(variant: VariantKind) -> ModelConfig {
        ModelConfig {
            layers: 4,
            dim: 16,
            heads: 4,
            ffn_dim: 32,
            vocab: 23,
            n_max: 32,
            variant,
            skip_ratio: 0.5,
            injection: HeadInjection::SecondHalf,
            positional: Positional::Learned,
            elem_bytes: 4,
        }
    }

    #[test]
    fn first_step_matches_single_token_forward() {
        let cfg = small_config(VariantKind::SkipV1);
        let ck = init_weights(&cfg, 9).unwrap();
        let mut cache = DecodeCache::new(&cfg);
        let logits = decode_step(&ck, &mut cache, 5).unwrap();
        let full = ck.forward(&[5]).unwrap();
        for (i, l) in logits.iter().enumerate() {
            assert!((l - full.at(i, 0)).abs() < 1e-5);
        }
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn sixteen_token_decode_matches_forward() {
        let tokens: Vec<usize> = (0..16).map(|i| (i * 7 + 3) % 23).collect();
        for variant in [
            VariantKind::Mha,
            VariantKind::SkipV1,
            VariantKind::ResFormer { lambda: 0.4 },
            VariantKind::Gqa { groups: 2 },
            VariantKind::SkipV1Gqa { groups: 2 },
            VariantKind::Mla { d_c: 8, d_r: 4 },
            VariantKind::SkipV1Mla { d_c: 8, d_r: 4 },
            VariantKind::YocoV,
            VariantKind::ClaV { period: 2 },
            VariantKind::SkipKv1,
            VariantKind::SkipV1Yoco,
        ] {
            let cfg = small_config(variant);
            let ck = init_weights(&cfg, 11).unwrap();
            let (last, _) = decode_all(&ck, &tokens);
            let full = ck.forward(&tokens).unwrap();
            let n = tokens.len();
            for (i, l) in last.iter().enumerate() {
                let diff = (l - full.at(i, n - 1)).abs();
                assert!(diff < 1e-4, "{variant:?} logit {i}: {diff}");
            }
        }
    }

    #[test]
    fn identical_streams_give_bit_identical_caches() {
        let cfg = small_config(VariantKind::SkipV1);
        let ck = init_weights(&cfg, 2).unwrap();
        let tokens = [1usize, 5, 9, 2];
        let (_, c1) = decode_all(&ck, &tokens);
        let (_, c2) = decode_all(&ck, &tokens);
        assert_eq!(c1, c2);
    }

    #[test]
    fn cached_bytes_grow_exactly_per_token() {
        for variant in [
            VariantKind::Mha,
            VariantKind::SkipV1,
            VariantKind::SkipV1Gqa { groups: 2 },
            VariantKind::YocoV,
            VariantKind::SkipKv1,
            VariantKind::SkipV1Yoco,
        ] {
            let cfg = small_config(variant);
            let ck = init_weights(&cfg, 4).unwrap();
            // Physical layout charges layer 1 its full latent.
            let spec = CacheSpec::with_mode(&cfg, MlaAccounting::Layer1Full);
            let mut cache = DecodeCache::new(&cfg);
            for step in 0..5usize {
                decode_step(&ck, &mut cache, step % cfg.vocab).unwrap();
                assert_eq!(
                    cache.cached_elements(),
                    (step as u64 + 1) * spec.elems_per_token(),
                    "{variant:?} step {step}"
                );
            }
        }
    }

    #[test]
    fn bank_is_append_only_across_steps() {
        let cfg = small_config(VariantKind::SkipV1);
        let ck = init_weights(&cfg, 6).unwrap();
        let mut cache = DecodeCache::new(&cfg);
        decode_step(&ck, &mut cache, 3).unwrap();
        let snap = cache.bank_snapshot();
        decode_step(&ck, &mut cache, 7).unwrap();
        let after = cache.bank_snapshot();
        for (before, now) in snap.iter().zip(&after) {
            assert_eq!(&now[..before.len()], &before[..], "bank prefix rewritten");
        }
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let cfg = small_config(VariantKind::Mha);
        let ck = init_weights(&cfg, 1).unwrap();
        let other = small_config(VariantKind::SkipV1);
        let mut cache = DecodeCache::new(&other);
        assert!(matches!(
            decode_step(&ck, &mut cache, 0),
            Err(CacheError::ConfigMismatch)
        ));
    }

    #[test]
    fn full_cache_is_rejected() {
        let mut cfg = small_config(VariantKind::Mha);
        cfg.n_max = 2;
        let ck = init_weights(&cfg, 1).unwrap();
        let mut cache = DecodeCache::new(&cfg);
        decode_step(&ck, &mut cache, 0).unwrap();
        decode_step(&ck, &mut cache, 1).unwrap();
        assert!(matches!(
            decode_step(&ck, &mut cache, 2),
            Err(CacheError::Full { .. })
        ));
    }
}
