//! Flat numeric kernels for the two-head linear-attention losses: forward
//! evaluation and hand-derived reverse-mode gradients over the per-sequence
//! sufficient statistics. These run inside the optimizer's hot loop, so they
//! work on plain slices with preallocated workspaces.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{sample_normal, SampleStats};

/// Which model family the loss describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Both heads read the copied (compressed) context summary.
    Compressed,
    /// The second head's value path reads the raw context.
    ValueSkip,
}

/// Trainable parameters of the two-head linear-attention model.
///
/// The query/key path is stored in factored form: the effective `M^h` is
/// `n_qk[h] * a_mat`, which is exactly the reachable set when queries act on
/// copied tokens through a rank-`a` map. The copy map (`a_mat`, `b_mat`)
/// is part of the variable set.
#[derive(Debug, Clone, PartialEq)]
pub struct MesaParams {
    pub d: usize,
    /// Copy rank of this parameterization.
    pub a: usize,
    /// Value-path matrices, d x d row-major.
    pub w: [Vec<f64>; 2],
    /// Query/key factors, d x a row-major.
    pub n_qk: [Vec<f64>; 2],
    /// Copy map sample part, a x d row-major.
    pub a_mat: Vec<f64>,
    /// Copy map label part, (d - a) x d row-major.
    pub b_mat: Vec<f64>,
}

impl MesaParams {
    pub fn zeros(d: usize, a: usize) -> Self {
        Self {
            d,
            a,
            w: [vec![0.0; d * d], vec![0.0; d * d]],
            n_qk: [vec![0.0; d * a], vec![0.0; d * a]],
            a_mat: vec![0.0; a * d],
            b_mat: vec![0.0; (d - a) * d],
        }
    }

    /// Gaussian init at the given scale; reproducible per RNG state.
    pub fn random(d: usize, a: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(d, a);
        for slot in p
            .w
            .iter_mut()
            .chain(p.n_qk.iter_mut())
            .chain([&mut p.a_mat, &mut p.b_mat])
        {
            for v in slot.iter_mut() {
                *v = scale * sample_normal(rng);
            }
        }
        p
    }

    /// Effective query/key matrix `M^h = n_qk[h] * a_mat`, d x d.
    pub fn m_eff(&self, h: usize) -> DMatrix<f64> {
        let n = DMatrix::from_row_slice(self.d, self.a, &self.n_qk[h]);
        let a = DMatrix::from_row_slice(self.a, self.d, &self.a_mat);
        n * a
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for part in self.parts() {
            v.extend_from_slice(part);
        }
        v
    }

    pub fn unflatten(d: usize, a: usize, flat: &[f64]) -> Self {
        let mut p = Self::zeros(d, a);
        let mut off = 0;
        for part in p.parts_mut() {
            let len = part.len();
            part.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        assert_eq!(off, flat.len());
        p
    }

    fn parts(&self) -> [&Vec<f64>; 6] {
        [&self.w[0], &self.w[1], &self.n_qk[0], &self.n_qk[1], &self.a_mat, &self.b_mat]
    }

    fn parts_mut(&mut self) -> [&mut Vec<f64>; 6] {
        let [w0, w1] = &mut self.w;
        let [n0, n1] = &mut self.n_qk;
        [w0, w1, n0, n1, &mut self.a_mat, &mut self.b_mat]
    }

    pub fn all_finite(&self) -> bool {
        self.parts().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

// out[m x n] = a[m x k] * b[k x n], all row-major.
fn mm(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    out.fill(0.0);
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let br = &b[p * n..(p + 1) * n];
            let or = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
}

// out[m] = a[m x k] * x[k]
fn mv(out: &mut [f64], a: &[f64], x: &[f64], m: usize, k: usize) {
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let mut acc = 0.0;
        for (r, xv) in row.iter().zip(x) {
            acc += r * xv;
        }
        out[i] = acc;
    }
}

// out[k] = a^T[k x m] * x[m] for row-major a[m x k]
fn mv_t(out: &mut [f64], a: &[f64], x: &[f64], m: usize, k: usize) {
    out.fill(0.0);
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let xv = x[i];
        for (o, r) in out.iter_mut().zip(row) {
            *o += r * xv;
        }
    }
}

/// Per-thread workspace: every buffer sized once for (d, a).
struct Work {
    d: usize,
    a: usize,
    asx: Vec<f64>,
    asy: Vec<f64>,
    bsyx: Vec<f64>,
    bsyy: Vec<f64>,
    g: [Vec<f64>; 2],
    u: Vec<f64>,
    t: [Vec<f64>; 2],
    gv: [Vec<f64>; 2],
    r: Vec<f64>,
    q: [Vec<f64>; 2],
    dt: Vec<f64>,
    du: Vec<f64>,
    c1: Vec<f64>,
    c2: Vec<f64>,
}

impl Work {
    fn new(d: usize, a: usize) -> Self {
        let b = d - a;
        Self {
            d,
            a,
            asx: vec![0.0; a * d],
            asy: vec![0.0; a * d],
            bsyx: vec![0.0; b * d],
            bsyy: vec![0.0; b * d],
            g: [vec![0.0; d * d], vec![0.0; d * d]],
            u: vec![0.0; a],
            t: [vec![0.0; d], vec![0.0; d]],
            gv: [vec![0.0; d], vec![0.0; d]],
            r: vec![0.0; d],
            q: [vec![0.0; d], vec![0.0; d]],
            dt: vec![0.0; d],
            du: vec![0.0; a],
            c1: vec![0.0; d * d],
            c2: vec![0.0; d * d],
        }
    }
}

/// Zero-valued gradient holder with the same layout as the parameters.
pub(crate) struct Grad {
    pub w: [Vec<f64>; 2],
    pub n_qk: [Vec<f64>; 2],
    pub a_mat: Vec<f64>,
    pub b_mat: Vec<f64>,
}

impl Grad {
    fn zeros(d: usize, a: usize) -> Self {
        Self {
            w: [vec![0.0; d * d], vec![0.0; d * d]],
            n_qk: [vec![0.0; d * a], vec![0.0; d * a]],
            a_mat: vec![0.0; a * d],
            b_mat: vec![0.0; (d - a) * d],
        }
    }

    fn add(&mut self, other: &Grad) {
        for (mine, theirs) in self
            .w
            .iter_mut()
            .chain(self.n_qk.iter_mut())
            .chain([&mut self.a_mat, &mut self.b_mat])
            .zip(
                other
                    .w
                    .iter()
                    .chain(other.n_qk.iter())
                    .chain([&other.a_mat, &other.b_mat]),
            )
        {
            for (m, t) in mine.iter_mut().zip(theirs) {
                *m += t;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for part in [
            &self.w[0],
            &self.w[1],
            &self.n_qk[0],
            &self.n_qk[1],
            &self.a_mat,
            &self.b_mat,
        ] {
            v.extend_from_slice(part);
        }
        v
    }

    fn scale(&mut self, s: f64) {
        for part in self
            .w
            .iter_mut()
            .chain(self.n_qk.iter_mut())
            .chain([&mut self.a_mat, &mut self.b_mat])
        {
            for v in part.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Build the per-sample context matrices G (per head) into the workspace.
fn build_g(kind: ModelKind, p: &MesaParams, s: &SampleStats, w: &mut Work) {
    let (d, a) = (w.d, w.a);
    let b = d - a;
    // A Sxx, A Sxy, B Syx, B Syy.
    mm(&mut w.asx, &p.a_mat, &s.sxx, a, d, d);
    mm(&mut w.asy, &p.a_mat, &s.sxy, a, d, d);
    // B Syx = B Sxy^T: compute with explicit transpose access.
    w.bsyx.fill(0.0);
    for i in 0..b {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                // Syx[k][j] = Sxy[j][k]
                acc += p.b_mat[i * d + k] * s.sxy[j * d + k];
            }
            w.bsyx[i * d + j] = acc;
        }
    }
    mm(&mut w.bsyy, &p.b_mat, &s.syy, b, d, d);

    // G1 = Sxx + [A Sxx A^T, A Sxy B^T; B Syx A^T, B Syy B^T].
    let g1 = &mut w.g[0];
    g1.copy_from_slice(&s.sxx);
    for i in 0..a {
        for j in 0..a {
            let mut acc = 0.0;
            for k in 0..d {
                acc += w.asx[i * d + k] * p.a_mat[j * d + k];
            }
            g1[i * d + j] += acc;
        }
        for j in 0..b {
            let mut acc = 0.0;
            for k in 0..d {
                acc += w.asy[i * d + k] * p.b_mat[j * d + k];
            }
            g1[i * d + (a + j)] += acc;
            // Lower-left block is the transpose of the upper-right one.
            let mut acc2 = 0.0;
            for k in 0..d {
                acc2 += w.bsyx[j * d + k] * p.a_mat[i * d + k];
            }
            g1[(a + j) * d + i] += acc2;
        }
    }
    for i in 0..b {
        for j in 0..b {
            let mut acc = 0.0;
            for k in 0..d {
                acc += w.bsyy[i * d + k] * p.b_mat[j * d + k];
            }
            g1[(a + i) * d + (a + j)] += acc;
        }
    }

    // Skip head: G2 = Sxx + [Syx A^T | Syy B^T].
    if kind == ModelKind::ValueSkip {
        let g2 = &mut w.g[1];
        g2.copy_from_slice(&s.sxx);
        for i in 0..d {
            for j in 0..a {
                let mut acc = 0.0;
                for k in 0..d {
                    // Syx[i][k] = Sxy[k][i]
                    acc += s.sxy[k * d + i] * p.a_mat[j * d + k];
                }
                g2[i * d + j] += acc;
            }
            for j in 0..b {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += s.syy[i * d + k] * p.b_mat[j * d + k];
                }
                g2[i * d + (a + j)] += acc;
            }
        }
    } else {
        let (head0, head1) = w.g.split_at_mut(1);
        head1[0].copy_from_slice(&head0[0]);
    }
}

/// Forward pass; returns the squared-error loss and fills the workspace.
fn forward(kind: ModelKind, p: &MesaParams, s: &SampleStats, w: &mut Work) -> f64 {
    let (d, a) = (w.d, w.a);
    build_g(kind, p, s, w);
    mv(&mut w.u, &p.a_mat, &s.x_q, a, d);
    for h in 0..2 {
        mv(&mut w.t[h], &p.n_qk[h], &w.u, d, a);
        let (g, t) = (&w.g[h], &w.t[h]);
        for i in 0..d {
            let row = &g[i * d..(i + 1) * d];
            let mut acc = 0.0;
            for (gv, tv) in row.iter().zip(t) {
                acc += gv * tv;
            }
            w.gv[h][i] = acc;
        }
    }
    let mut loss = 0.0;
    for i in 0..d {
        let mut pred = 0.0;
        for h in 0..2 {
            let row = &p.w[h][i * d..(i + 1) * d];
            for (wv, gv) in row.iter().zip(&w.gv[h]) {
                pred += wv * gv;
            }
        }
        let r = pred - s.y_q[i];
        w.r[i] = r;
        loss += r * r;
    }
    loss
}

/// Backward pass; accumulates per-sample gradients into `grad`.
fn backward(kind: ModelKind, p: &MesaParams, s: &SampleStats, w: &mut Work, grad: &mut Grad) {
    let (d, a) = (w.d, w.a);
    let b = d - a;
    // dpred = 2 r.
    for v in w.r.iter_mut() {
        *v *= 2.0;
    }
    w.du.fill(0.0);
    w.c1.fill(0.0);
    w.c2.fill(0.0);
    for h in 0..2 {
        // dW_h += dpred (outer) gv_h; q_h = W_h^T dpred.
        for i in 0..d {
            let ri = w.r[i];
            let growi = &mut grad.w[h][i * d..(i + 1) * d];
            for (gslot, gv) in growi.iter_mut().zip(&w.gv[h]) {
                *gslot += ri * gv;
            }
        }
        mv_t(&mut w.q[h], &p.w[h], &w.r, d, d);

        // dG_h += q_h (outer) t_h (into the right cotangent bucket).
        let c = if kind == ModelKind::ValueSkip && h == 1 { &mut w.c2 } else { &mut w.c1 };
        for i in 0..d {
            let qi = w.q[h][i];
            let crow = &mut c[i * d..(i + 1) * d];
            for (cslot, tv) in crow.iter_mut().zip(&w.t[h]) {
                *cslot += qi * tv;
            }
        }

        // dt_h = G_h^T q_h; dN_h += dt_h (outer) u; du += N_h^T dt_h.
        mv_t(&mut w.dt, &w.g[h], &w.q[h], d, d);
        for i in 0..d {
            let dti = w.dt[i];
            let nrow = &mut grad.n_qk[h][i * a..(i + 1) * a];
            for (nslot, uv) in nrow.iter_mut().zip(&w.u) {
                *nslot += dti * uv;
            }
        }
        for i in 0..d {
            let dti = w.dt[i];
            let nrow = &p.n_qk[h][i * a..(i + 1) * a];
            for (duv, nv) in w.du.iter_mut().zip(nrow) {
                *duv += nv * dti;
            }
        }
    }

    // Query path: dA += du (outer) x_q.
    for i in 0..a {
        let dui = w.du[i];
        let arow = &mut grad.a_mat[i * d..(i + 1) * d];
        for (aslot, xv) in arow.iter_mut().zip(&s.x_q) {
            *aslot += dui * xv;
        }
    }

    // G1 cotangent paths into A and B.
    // dA += (TL + TL^T) asx + (TR + BL^T) bsyx, blocks of c1.
    for i in 0..a {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..a {
                acc += (w.c1[i * d + k] + w.c1[k * d + i]) * w.asx[k * d + j];
            }
            for k in 0..b {
                acc += (w.c1[i * d + (a + k)] + w.c1[(a + k) * d + i]) * w.bsyx[k * d + j];
            }
            grad.a_mat[i * d + j] += acc;
        }
    }
    // dB += (TR^T + BL) asy + (BR + BR^T) bsyy.
    for i in 0..b {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..a {
                acc += (w.c1[k * d + (a + i)] + w.c1[(a + i) * d + k]) * w.asy[k * d + j];
            }
            for k in 0..b {
                acc += (w.c1[(a + i) * d + (a + k)] + w.c1[(a + k) * d + (a + i)])
                    * w.bsyy[k * d + j];
            }
            grad.b_mat[i * d + j] += acc;
        }
    }

    // G2 cotangent paths (skip head only).
    if kind == ModelKind::ValueSkip {
        // dA += CL^T Syx, CL = c2[:, 0..a].
        for i in 0..a {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    // Syx[k][j] = Sxy[j][k]
                    acc += w.c2[k * d + i] * s.sxy[j * d + k];
                }
                grad.a_mat[i * d + j] += acc;
            }
        }
        // dB += CR^T Syy, CR = c2[:, a..d].
        for i in 0..b {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += w.c2[k * d + (a + i)] * s.syy[k * d + j];
                }
                grad.b_mat[i * d + j] += acc;
            }
        }
    }
}

/// Monte-Carlo loss over a batch: (mean, standard error). Parallel over
/// fixed chunks with an ordered reduction.
pub fn mc_loss(kind: ModelKind, params: &MesaParams, batch: &[SampleStats]) -> (f64, f64) {
    let losses = per_sample_losses(kind, params, batch);
    mean_stderr(&losses)
}

/// Per-sample losses in batch order.
pub fn per_sample_losses(kind: ModelKind, params: &MesaParams, batch: &[SampleStats]) -> Vec<f64> {
    const CHUNK: usize = 512;
    let chunks: Vec<Vec<f64>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut w = Work::new(params.d, params.a);
            chunk.iter().map(|s| forward(kind, params, s, &mut w)).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(batch.len());
    for c in chunks {
        out.extend(c);
    }
    out
}

pub(crate) fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean loss and mean gradient over a batch (flat layout matching
/// [`MesaParams::flatten`]).
pub fn mc_loss_and_grad(
    kind: ModelKind,
    params: &MesaParams,
    batch: &[SampleStats],
) -> (f64, Vec<f64>) {
    const CHUNK: usize = 512;
    let partials: Vec<(f64, Grad)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut w = Work::new(params.d, params.a);
            let mut g = Grad::zeros(params.d, params.a);
            let mut loss = 0.0;
            for s in chunk {
                loss += forward(kind, params, s, &mut w);
                backward(kind, params, s, &mut w, &mut g);
            }
            (loss, g)
        })
        .collect();
    let mut total = 0.0;
    let mut grad = Grad::zeros(params.d, params.a);
    for (loss, g) in &partials {
        total += loss;
        grad.add(g);
    }
    let inv = 1.0 / batch.len() as f64;
    grad.scale(inv);
    (total * inv, grad.flatten())
}

/// Prediction `sum_h W^h G^h M^h x_q` for one sample.
pub fn predictor(kind: ModelKind, params: &MesaParams, s: &SampleStats) -> Vec<f64> {
    let mut w = Work::new(params.d, params.a);
    let loss = forward(kind, params, s, &mut w);
    let _ = loss;
    let d = params.d;
    let mut pred = vec![0.0; d];
    for (i, p) in pred.iter_mut().enumerate() {
        let mut acc = 0.0;
        for h in 0..2 {
            let row = &params.w[h][i * d..(i + 1) * d];
            for (wv, gv) in row.iter().zip(&w.gv[h]) {
                acc += wv * gv;
            }
        }
        *p = acc;
    }
    pred
}

/// The odd/even decomposition terms N1 (even in labels), N2 (even), N3 (odd)
/// for one sample, as d x d matrices. Their sum equals
/// `sum_h W^h G^h M^h` exactly.
pub fn n_matrices(
    kind: ModelKind,
    params: &MesaParams,
    s: &SampleStats,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let d = params.d;
    let a = params.a;
    let to_mat = |flat: &[f64], r: usize, c: usize| DMatrix::from_row_slice(r, c, flat);
    let sxx = to_mat(&s.sxx, d, d);
    let sxy = to_mat(&s.sxy, d, d);
    let syy = to_mat(&s.syy, d, d);
    let syx = sxy.transpose();
    let a_m = to_mat(&params.a_mat, a, d);
    let b_m = to_mat(&params.b_mat, d - a, d);

    let w_full: Vec<DMatrix<f64>> = (0..2).map(|h| to_mat(&params.w[h], d, d)).collect();
    let m_full: Vec<DMatrix<f64>> = (0..2).map(|h| params.m_eff(h)).collect();
    let w1: Vec<DMatrix<f64>> = w_full.iter().map(|w| w.columns(0, a).into_owned()).collect();
    let w2: Vec<DMatrix<f64>> = w_full.iter().map(|w| w.columns(a, d - a).into_owned()).collect();
    let m1: Vec<DMatrix<f64>> = m_full.iter().map(|m| m.rows(0, a).into_owned()).collect();
    let m2: Vec<DMatrix<f64>> = m_full.iter().map(|m| m.rows(a, d - a).into_owned()).collect();

    let asxa = &a_m * &sxx * a_m.transpose();
    let asyb = &a_m * &sxy * b_m.transpose();
    let bsya = &b_m * &syx * a_m.transpose();
    let bsyb = &b_m * &syy * b_m.transpose();

    match kind {
        ModelKind::Compressed => {
            let mut n1 = DMatrix::zeros(d, d);
            let mut n2 = DMatrix::zeros(d, d);
            let mut n3 = DMatrix::zeros(d, d);
            for h in 0..2 {
                n1 += &w_full[h] * &sxx * &m_full[h] + &w1[h] * &asxa * &m1[h];
                n2 += &w2[h] * &bsyb * &m2[h];
                n3 += &w1[h] * &asyb * &m2[h] + &w2[h] * &bsya * &m1[h];
            }
            (n1, n2, n3)
        }
        ModelKind::ValueSkip => {
            let mut n1 = DMatrix::zeros(d, d);
            for h in 0..2 {
                n1 += &w_full[h] * &sxx * &m_full[h];
            }
            n1 += &w1[0] * &asxa * &m1[0];
            let n2 = &w2[0] * &bsyb * &m2[0] + &w_full[1] * &syy * b_m.transpose() * &m2[1];
            let n3 = &w1[0] * &asyb * &m2[0]
                + &w2[0] * &bsya * &m1[0]
                + &w_full[1] * &syx * a_m.transpose() * &m1[1];
            (n1, n2, n3)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesa::{gen_batch, TaskSpec};
    use rand::SeedableRng;

    fn spec(d: usize, a: usize, seed: u64) -> TaskSpec {
        TaskSpec::with_identity_mean(d, a, 8, 0.3, 1.0, 64, seed)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // Odd sizes to catch transposition mistakes; both model kinds; edge
        // ranks included.
        for (d, a) in [(3usize, 2usize), (4, 2), (3, 0), (3, 3)] {
            for kind in [ModelKind::Compressed, ModelKind::ValueSkip] {
                let task = spec(d, a, 17);
                let batch = gen_batch(&task, 5, 3);
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let params = MesaParams::random(d, a, 0.3, &mut rng);
                let (loss0, grad) = mc_loss_and_grad(kind, &params, &batch);
                assert!(loss0.is_finite());

                let flat = params.flatten();
                let h = 1e-6;
                for i in 0..flat.len() {
                    let mut up = flat.clone();
                    up[i] += h;
                    let mut dn = flat.clone();
                    dn[i] -= h;
                    let (lu, _) = mc_loss(kind, &MesaParams::unflatten(d, a, &up), &batch);
                    let (ld, _) = mc_loss(kind, &MesaParams::unflatten(d, a, &dn), &batch);
                    let fd = (lu - ld) / (2.0 * h);
                    let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1.0);
                    assert!(
                        err < 1e-6,
                        "{kind:?} d={d} a={a} coord {i}: fd {fd} vs ad {}",
                        grad[i]
                    );
                }
            }
        }
    }

    #[test]
    fn zero_params_loss_is_label_energy() {
        // All-zero parameters: loss = E ||y||^2 = d^2 + d sigma^2 at W0 = 0.
        let d = 3;
        let mut task = spec(d, 2, 23);
        task.w0 = DMatrix::zeros(d, d);
        task.sigma = 0.5;
        let batch = gen_batch(&task, 40_000, 1);
        let params = MesaParams::zeros(d, 2);
        let (loss, se) = mc_loss(ModelKind::Compressed, &params, &batch);
        let expect = (d * d) as f64 + d as f64 * task.sigma * task.sigma;
        assert!(
            (loss - expect).abs() < 3.0 * se,
            "loss {loss} vs {expect} (se {se})"
        );
    }

    #[test]
    fn loss_is_deterministic() {
        let task = spec(3, 1, 2);
        let batch = gen_batch(&task, 200, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = MesaParams::random(3, 1, 0.2, &mut rng);
        let a = mc_loss(ModelKind::ValueSkip, &params, &batch);
        let b = mc_loss(ModelKind::ValueSkip, &params, &batch);
        assert_eq!(a, b);
    }

    #[test]
    fn n_matrices_sum_to_full_operator() {
        // N1 + N2 + N3 must reproduce sum_h W^h G^h M^h; the predictor is
        // that operator applied to x_q.
        for kind in [ModelKind::Compressed, ModelKind::ValueSkip] {
            let d = 3;
            let a = 2;
            let task = spec(d, a, 31);
            let batch = gen_batch(&task, 3, 7);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let params = MesaParams::random(d, a, 0.4, &mut rng);
            for s in &batch {
                let (n1, n2, n3) = n_matrices(kind, &params, s);
                let total = &n1 + &n2 + &n3;
                let pred = predictor(kind, &params, s);
                let xq = nalgebra::DVector::from_column_slice(&s.x_q);
                let via_n = &total * &xq;
                for i in 0..d {
                    assert!(
                        (pred[i] - via_n[i]).abs() < 1e-9,
                        "{kind:?}: {} vs {}",
                        pred[i],
                        via_n[i]
                    );
                }
            }
        }
    }
}
