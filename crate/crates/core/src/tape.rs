//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! Eager Wengert tape: each operation computes its value immediately and
//! records enough context for an exact backward pass. One tape per training
//! step, single-threaded. Node order is creation order, which is already a
//! topological order, so backward is a single reverse sweep with a fixed
//! accumulation order.

use crate::tensor::{
    add, causal_softmax, cross_entropy, layer_norm_cols, matmul, scale, sub, transpose, NumResult,
    NumericError, Scalar, Tensor,
};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Relu(Var),
    CausalSoftmax { scores: Var, scale: T },
    LayerNormCols { x: Var, gain: Var, bias: Var, eps: T },
    GatherCols { table: Var, ids: Vec<usize> },
    SliceRows { src: Var, r0: usize, r1: usize },
    ConcatRows(Var, Var),
    SliceCols { src: Var, c0: usize, c1: usize },
    Rope { src: Var, pos0: usize, base: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, if `v` participated in the graph.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

/// Recording tape. Values are computed eagerly; `backward` produces exact
/// reverse-mode gradients for every node.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> NumResult<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> NumResult<Var> {
        let value = add(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> NumResult<Var> {
        let value = sub(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = scale(self.value(a), c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = transpose(self.value(a));
        self.push(value, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max_s(T::ZERO));
        self.push(value, Op::Relu(a))
    }

    pub fn causal_softmax(&mut self, scores: Var, sc: T) -> NumResult<Var> {
        let value = causal_softmax(self.value(scores), sc)?;
        Ok(self.push(value, Op::CausalSoftmax { scores, scale: sc }))
    }

    pub fn layer_norm_cols(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> NumResult<Var> {
        let value = layer_norm_cols(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(value, Op::LayerNormCols { x, gain, bias, eps }))
    }

    /// Select columns of `table` (d x V) by id, producing d x len(ids).
    pub fn gather_cols(&mut self, table: Var, ids: &[usize]) -> NumResult<Var> {
        let t = self.value(table);
        let (d, v) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(vec![d, ids.len()]);
        for (j, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(NumericError::IndexOutOfRange {
                    op: "gather_cols",
                    index: id,
                    extent: v,
                });
            }
            for i in 0..d {
                *out.at_mut(i, j) = t.at(i, id);
            }
        }
        Ok(self.push(out, Op::GatherCols { table, ids: ids.to_vec() }))
    }

    pub fn slice_rows(&mut self, src: Var, r0: usize, r1: usize) -> NumResult<Var> {
        let s = self.value(src);
        if r1 > s.rows() || r0 > r1 {
            return Err(NumericError::IndexOutOfRange {
                op: "slice_rows",
                index: r1,
                extent: s.rows(),
            });
        }
        let n = s.cols();
        let data = s.data()[r0 * n..r1 * n].to_vec();
        let out = Tensor::new(vec![r1 - r0, n], data)?;
        Ok(self.push(out, Op::SliceRows { src, r0, r1 }))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> NumResult<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(NumericError::ShapeMismatch {
                op: "concat_rows",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let out = Tensor::new(vec![ta.rows() + tb.rows(), ta.cols()], data)?;
        Ok(self.push(out, Op::ConcatRows(a, b)))
    }

    pub fn slice_cols(&mut self, src: Var, c0: usize, c1: usize) -> NumResult<Var> {
        let s = self.value(src);
        if c1 > s.cols() || c0 > c1 {
            return Err(NumericError::IndexOutOfRange {
                op: "slice_cols",
                index: c1,
                extent: s.cols(),
            });
        }
        let (m, n) = (s.rows(), s.cols());
        let mut out = Tensor::zeros(vec![m, c1 - c0]);
        for i in 0..m {
            for j in c0..c1 {
                *out.at_mut(i, j - c0) = s.data()[i * n + j];
            }
        }
        Ok(self.push(out, Op::SliceCols { src, c0, c1 }))
    }

    /// Rotary position encoding on a (k x n) matrix with even k. Column `j`
    /// is rotated pairwise by angles for position `pos0 + j`.
    pub fn rope(&mut self, src: Var, pos0: usize, base: f64) -> NumResult<Var> {
        let s = self.value(src);
        let value = rope_forward(s, pos0, base)?;
        Ok(self.push(value, Op::Rope { src, pos0, base }))
    }

    /// Scalar-valued mean cross-entropy node (shape [1]).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> NumResult<Var> {
        let loss = cross_entropy(self.value(logits), targets)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec() },
        ))
    }

    /// Convenience: `lam * a + (1 - lam) * b`.
    pub fn lerp(&mut self, a: Var, b: Var, lam: T) -> NumResult<Var> {
        let sa = self.scale(a, lam);
        let sb = self.scale(b, T::ONE - lam);
        self.add(sa, sb)
    }

    /// Reverse sweep from a scalar loss node. Returns gradients for every
    /// node reached by the sweep.
    pub fn backward(&self, loss: Var) -> NumResult<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(NumericError::InvalidArgument {
                op: "backward",
                msg: "loss must be a single scalar".into(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape().to_vec(), T::ONE));

        for idx in (0..self.nodes.len()).rev() {
            // Leaf gradients stay in place for the caller to read.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf => unreachable!(),
                Op::Matmul(a, b) => {
                    let bt = transpose(self.value(*b));
                    let da = matmul(&g, &bt)?;
                    let at = transpose(self.value(*a));
                    let db = matmul(&at, &g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, scale(&g, -T::ONE))?;
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, scale(&g, *c))?;
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, transpose(&g))?;
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let mut da = g.clone();
                    for (dv, &x) in da.data_mut().iter_mut().zip(av.data()) {
                        if !(x > T::ZERO) {
                            *dv = T::ZERO;
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::CausalSoftmax { scores, scale: sc } => {
                    let out = &self.nodes[idx].value;
                    let n = out.rows();
                    let mut ds = Tensor::zeros(vec![n, n]);
                    for j in 0..n {
                        let mut dot = T::ZERO;
                        for i in 0..=j {
                            dot += g.at(i, j) * out.at(i, j);
                        }
                        for i in 0..=j {
                            *ds.at_mut(i, j) = *sc * out.at(i, j) * (g.at(i, j) - dot);
                        }
                    }
                    accumulate(&mut grads, *scores, ds)?;
                }
                Op::LayerNormCols { x, gain, bias, eps } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let (d, n) = (xv.rows(), xv.cols());
                    let inv_d = T::ONE / T::from_f64(d as f64);
                    let mut dx = Tensor::zeros(vec![d, n]);
                    let mut dgain = Tensor::zeros(vec![d]);
                    let mut dbias = Tensor::zeros(vec![d]);
                    for j in 0..n {
                        let mut mean = T::ZERO;
                        for i in 0..d {
                            mean += xv.at(i, j);
                        }
                        mean = mean * inv_d;
                        let mut var = T::ZERO;
                        for i in 0..d {
                            let c = xv.at(i, j) - mean;
                            var += c * c;
                        }
                        var = var * inv_d;
                        let inv_std = T::ONE / (var + *eps).sqrt();
                        // xh_i = (x_i - mean) * inv_std
                        let mut mean_gy = T::ZERO;
                        let mut mean_gy_xh = T::ZERO;
                        for i in 0..d {
                            let xh = (xv.at(i, j) - mean) * inv_std;
                            let gy = g.at(i, j) * gv.data()[i];
                            mean_gy += gy;
                            mean_gy_xh += gy * xh;
                            dgain.data_mut()[i] += g.at(i, j) * xh;
                            dbias.data_mut()[i] += g.at(i, j);
                        }
                        mean_gy = mean_gy * inv_d;
                        mean_gy_xh = mean_gy_xh * inv_d;
                        for i in 0..d {
                            let xh = (xv.at(i, j) - mean) * inv_std;
                            let gy = g.at(i, j) * gv.data()[i];
                            *dx.at_mut(i, j) = inv_std * (gy - mean_gy - xh * mean_gy_xh);
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                    accumulate(&mut grads, *gain, dgain)?;
                    accumulate(&mut grads, *bias, dbias)?;
                }
                Op::GatherCols { table, ids } => {
                    let t = self.value(*table);
                    let (d, v) = (t.rows(), t.cols());
                    let mut dt = Tensor::zeros(vec![d, v]);
                    for (j, &id) in ids.iter().enumerate() {
                        for i in 0..d {
                            *dt.at_mut(i, id) += g.at(i, j);
                        }
                    }
                    accumulate(&mut grads, *table, dt)?;
                }
                Op::SliceRows { src, r0, r1 } => {
                    let s = self.value(*src);
                    let mut ds = Tensor::zeros(vec![s.rows(), s.cols()]);
                    for i in *r0..*r1 {
                        for j in 0..s.cols() {
                            *ds.at_mut(i, j) = g.at(i - r0, j);
                        }
                    }
                    accumulate(&mut grads, *src, ds)?;
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.value(*a).rows();
                    let n = g.cols();
                    let da = Tensor::new(vec![ra, n], g.data()[..ra * n].to_vec())?;
                    let rb = self.value(*b).rows();
                    let db = Tensor::new(vec![rb, n], g.data()[ra * n..].to_vec())?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::SliceCols { src, c0, c1 } => {
                    let s = self.value(*src);
                    let mut ds = Tensor::zeros(vec![s.rows(), s.cols()]);
                    for i in 0..s.rows() {
                        for j in *c0..*c1 {
                            *ds.at_mut(i, j) = g.at(i, j - c0);
                        }
                    }
                    accumulate(&mut grads, *src, ds)?;
                }
                Op::Rope { src, pos0, base } => {
                    accumulate(&mut grads, *src, rope_backward(&g, *pos0, *base))?;
                }
                Op::CrossEntropy { logits, targets } => {
                    let lv = self.value(*logits);
                    let up = g.data()[0];
                    let (v, n) = (lv.rows(), lv.cols());
                    let inv_n = T::ONE / T::from_f64(n as f64);
                    let mut dl = Tensor::zeros(vec![v, n]);
                    for (j, &t) in targets.iter().enumerate() {
                        let mut m = lv.at(0, j);
                        for i in 1..v {
                            m = m.max_s(lv.at(i, j));
                        }
                        let mut denom = T::ZERO;
                        for i in 0..v {
                            denom += (lv.at(i, j) - m).exp();
                        }
                        for i in 0..v {
                            let p = (lv.at(i, j) - m).exp() / denom;
                            let ind = if i == t { T::ONE } else { T::ZERO };
                            *dl.at_mut(i, j) = up * (p - ind) * inv_n;
                        }
                    }
                    accumulate(&mut grads, *logits, dl)?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Recompute every node value from the recorded leaves and operations.
    /// Used to check that the tape reproduces the forward pass bit-for-bit.
    pub fn replay(&self) -> NumResult<Vec<Tensor<T>>> {
        let mut vals: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Matmul(a, b) => matmul(&vals[a.0], &vals[b.0])?,
                Op::Add(a, b) => add(&vals[a.0], &vals[b.0])?,
                Op::Sub(a, b) => sub(&vals[a.0], &vals[b.0])?,
                Op::Scale(a, c) => scale(&vals[a.0], *c),
                Op::Transpose(a) => transpose(&vals[a.0]),
                Op::Relu(a) => vals[a.0].map(|v| v.max_s(T::ZERO)),
                Op::CausalSoftmax { scores, scale: sc } => causal_softmax(&vals[scores.0], *sc)?,
                Op::LayerNormCols { x, gain, bias, eps } => {
                    layer_norm_cols(&vals[x.0], &vals[gain.0], &vals[bias.0], *eps)?
                }
                Op::GatherCols { table, ids } => {
                    let t = &vals[table.0];
                    let d = t.rows();
                    let mut out = Tensor::zeros(vec![d, ids.len()]);
                    for (j, &id) in ids.iter().enumerate() {
                        for i in 0..d {
                            *out.at_mut(i, j) = t.at(i, id);
                        }
                    }
                    out
                }
                Op::SliceRows { src, r0, r1 } => {
                    let s = &vals[src.0];
                    let n = s.cols();
                    Tensor::new(vec![r1 - r0, n], s.data()[r0 * n..r1 * n].to_vec())?
                }
                Op::ConcatRows(a, b) => {
                    let mut data = vals[a.0].data().to_vec();
                    data.extend_from_slice(vals[b.0].data());
                    Tensor::new(vec![vals[a.0].rows() + vals[b.0].rows(), vals[a.0].cols()], data)?
                }
                Op::SliceCols { src, c0, c1 } => {
                    let s = &vals[src.0];
                    let mut out = Tensor::zeros(vec![s.rows(), c1 - c0]);
                    for i in 0..s.rows() {
                        for j in *c0..*c1 {
                            *out.at_mut(i, j - c0) = s.at(i, j);
                        }
                    }
                    out
                }
                Op::Rope { src, pos0, base } => rope_forward(&vals[src.0], *pos0, *base)?,
                Op::CrossEntropy { logits, targets } => {
                    Tensor::scalar(cross_entropy(&vals[logits.0], targets)?)
                }
            };
            vals.push(v);
        }
        Ok(vals)
    }
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    delta: Tensor<T>,
) -> NumResult<()> {
    match &mut grads[v.0] {
        Some(existing) => {
            *existing = add(existing, &delta)?;
        }
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

pub(crate) fn rope_forward<T: Scalar>(x: &Tensor<T>, pos0: usize, base: f64) -> NumResult<Tensor<T>> {
    let k = x.rows();
    if k % 2 != 0 {
        return Err(NumericError::InvalidArgument {
            op: "rope",
            msg: format!("row count must be even, got {k}"),
        });
    }
    let n = x.cols();
    let mut out = Tensor::zeros(vec![k, n]);
    for p in 0..k / 2 {
        let omega = base.powf(-2.0 * p as f64 / k as f64);
        for j in 0..n {
            let theta = (pos0 + j) as f64 * omega;
            let (sin, cos) = (T::from_f64(theta.sin()), T::from_f64(theta.cos()));
            let x0 = x.at(2 * p, j);
            let x1 = x.at(2 * p + 1, j);
            *out.at_mut(2 * p, j) = x0 * cos - x1 * sin;
            *out.at_mut(2 * p + 1, j) = x0 * sin + x1 * cos;
        }
    }
    Ok(out)
}

fn rope_backward<T: Scalar>(g: &Tensor<T>, pos0: usize, base: f64) -> Tensor<T> {
    let (k, n) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(vec![k, n]);
    for p in 0..k / 2 {
        let omega = base.powf(-2.0 * p as f64 / k as f64);
        for j in 0..n {
            let theta = (pos0 + j) as f64 * omega;
            let (sin, cos) = (T::from_f64(theta.sin()), T::from_f64(theta.cos()));
            let g0 = g.at(2 * p, j);
            let g1 = g.at(2 * p + 1, j);
            *out.at_mut(2 * p, j) = g0 * cos + g1 * sin;
            *out.at_mut(2 * p + 1, j) = -(g0 * sin) + g1 * cos;
        }
    }
    out
}
