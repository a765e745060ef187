//! Numerical bench for the two-layer linear-attention regression model:
//! synthetic in-context regression tasks, the copying-map embedding, the
//! context-summary matrices for the compressed and value-skip models, the
//! closed-form ridge reference, and a Monte-Carlo verification that the
//! value-skip model's minimal loss sits strictly below the compressed
//! model's. Everything here runs in 64-bit.

mod kernels;
mod verify;

pub use kernels::{
    mc_loss, mc_loss_and_grad, n_matrices, predictor, MesaParams, ModelKind,
};
pub use verify::{
    adam_minimize, construct_skip_optimum, decomposition_gap, estimate_lambda, loss_l1, loss_l2,
    odd_even_cross_term, optimize, rank_gap, ridge_optimality_residual, verify_theorem,
    LambdaEstimate, MesaError, OptimizeOpts, TheoremReport,
};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Synthetic in-context regression task description.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    /// Sample/label dimension.
    pub d: usize,
    /// Copy rank of the compressed model's first-layer map (0 <= a <= d).
    pub a: usize,
    /// Context pairs per sequence.
    pub n: usize,
    /// Label noise standard deviation.
    pub sigma: f64,
    /// Mean of the per-sequence coefficient matrix.
    pub w0: DMatrix<f64>,
    /// Monte-Carlo sample count.
    pub mc: usize,
    pub seed: u64,
}

impl TaskSpec {
    /// Spec with `W0 = scale * sqrt(d) * I`.
    pub fn with_identity_mean(
        d: usize,
        a: usize,
        n: usize,
        sigma: f64,
        w0_scale: f64,
        mc: usize,
        seed: u64,
    ) -> Self {
        let w0 = DMatrix::identity(d, d) * (w0_scale * (d as f64).sqrt());
        Self { d, a, n, sigma, w0, mc, seed }
    }

    /// Reset the prior mean to `scale * sqrt(d) * I`.
    pub fn set_w0_scale(&mut self, scale: f64) {
        self.w0 = DMatrix::identity(self.d, self.d) * (scale * (self.d as f64).sqrt());
    }

    /// Separation precondition: smallest singular value of `W0` exceeds
    /// `2 sqrt(d) sigma`.
    pub fn precondition_ok(&self) -> bool {
        let svals = self.w0.clone().svd(false, false).singular_values;
        let min = svals.iter().cloned().fold(f64::INFINITY, f64::min);
        min > 2.0 * (self.d as f64).sqrt() * self.sigma
    }
}

/// One drawn sequence: context samples and labels, plus the held-out query.
#[derive(Debug, Clone)]
pub struct SequenceData {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub x_query: DVector<f64>,
    pub y_query: DVector<f64>,
    pub w_star: DMatrix<f64>,
}

pub(crate) fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fresh draw: `x_i ~ N(0, I)`, `W* ~ N(W0, I)` entrywise, labels
/// `y = W* x + eps` with `eps ~ N(0, sigma^2 I)`. Reproducible per RNG state.
pub fn sample_sequence(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> SequenceData {
    let d = spec.d;
    let n = spec.n;
    let w_star =
        DMatrix::from_fn(d, d, |r, c| spec.w0[(r, c)] + sample_normal(rng));
    let x = DMatrix::from_fn(d, n, |_, _| sample_normal(rng));
    let eps = DMatrix::from_fn(d, n, |_, _| spec.sigma * sample_normal(rng));
    let y = &w_star * &x + eps;
    let x_query = DVector::from_fn(d, |_, _| sample_normal(rng));
    let y_query = &w_star * &x_query
        + DVector::from_fn(d, |_, _| spec.sigma * sample_normal(rng));
    SequenceData { x, y, x_query, y_query, w_star }
}

/// Per-sequence sufficient statistics for the loss kernels, stored flat
/// (row-major d x d blocks).
#[derive(Debug, Clone)]
pub struct SampleStats {
    pub d: usize,
    /// X X^T
    pub sxx: Vec<f64>,
    /// X Y^T
    pub sxy: Vec<f64>,
    /// Y Y^T
    pub syy: Vec<f64>,
    pub x_q: Vec<f64>,
    pub y_q: Vec<f64>,
}

impl SampleStats {
    pub fn from_sequence(seq: &SequenceData) -> Self {
        let d = seq.x.nrows();
        let sxx = &seq.x * seq.x.transpose();
        let sxy = &seq.x * seq.y.transpose();
        let syy = &seq.y * seq.y.transpose();
        let flat = |m: &DMatrix<f64>| {
            let mut v = Vec::with_capacity(d * d);
            for r in 0..d {
                for c in 0..d {
                    v.push(m[(r, c)]);
                }
            }
            v
        };
        SampleStats {
            d,
            sxx: flat(&sxx),
            sxy: flat(&sxy),
            syy: flat(&syy),
            x_q: seq.x_query.iter().cloned().collect(),
            y_q: seq.y_query.iter().cloned().collect(),
        }
    }
}

/// Draw `count` sequences as sufficient statistics. Parallel over chunks
/// with per-chunk generator streams and a deterministic assembly order, so
/// the batch depends only on `(spec, count, salt)`.
pub fn gen_batch(spec: &TaskSpec, count: usize, salt: u64) -> Vec<SampleStats> {
    const CHUNK: usize = 256;
    let chunks = count.div_ceil(CHUNK);
    let mut out: Vec<Vec<SampleStats>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                spec.seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15) ^ (c as u64).wrapping_mul(0xd1342543de82ef95),
            );
            let take = CHUNK.min(count - c * CHUNK);
            (0..take)
                .map(|_| SampleStats::from_sequence(&sample_sequence(spec, &mut rng)))
                .collect()
        })
        .collect();
    let mut flat = Vec::with_capacity(count);
    for chunk in out.drain(..) {
        flat.extend(chunk);
    }
    flat
}

/// First-layer copying map: the compressed token carries `(A x; B y)`.
#[derive(Debug, Clone)]
pub struct CopyMap {
    /// a x d
    pub a_mat: DMatrix<f64>,
    /// (d - a) x d
    pub b_mat: DMatrix<f64>,
}

impl CopyMap {
    pub fn identity(d: usize) -> Self {
        Self { a_mat: DMatrix::identity(d, d), b_mat: DMatrix::zeros(0, d) }
    }

    pub fn rank(&self) -> usize {
        self.a_mat.nrows()
    }
}

/// Assemble the copied sequence
/// `(x_1, (A x_1; B y_1), ..., x_n, (A x_n; B y_n), (A x_q; 0))`,
/// a `d x (2n + 1)` matrix. The query's label slot is zeroed.
pub fn copy_embed(data: &SequenceData, map: &CopyMap) -> Result<DMatrix<f64>, MesaError> {
    let d = data.x.nrows();
    let a = map.a_mat.nrows();
    if a > d || map.a_mat.ncols() != d || map.b_mat.nrows() != d - a || map.b_mat.ncols() != d {
        return Err(MesaError::Config(format!(
            "copy map shapes {:?} / {:?} inconsistent with d = {d}",
            map.a_mat.shape(),
            map.b_mat.shape()
        )));
    }
    let n = data.x.ncols();
    let mut out = DMatrix::zeros(d, 2 * n + 1);
    for i in 0..n {
        let xi = data.x.column(i);
        let yi = data.y.column(i);
        out.column_mut(2 * i).copy_from(&xi);
        let ax = &map.a_mat * xi;
        let by = &map.b_mat * yi;
        let mut z = out.column_mut(2 * i + 1);
        for r in 0..a {
            z[r] = ax[r];
        }
        for r in 0..d - a {
            z[a + r] = by[r];
        }
    }
    let axq = &map.a_mat * &data.x_query;
    let mut q = out.column_mut(2 * n);
    for r in 0..a {
        q[r] = axq[r];
    }
    Ok(out)
}

/// Context-summary matrix of the compressed model:
/// `G1 = X X^T + Z Z^T` with `Z = (A X; B Y)`.
pub fn build_g1(data: &SequenceData, map: &CopyMap) -> Result<DMatrix<f64>, MesaError> {
    let d = data.x.nrows();
    if map.a_mat.ncols() != d {
        return Err(MesaError::Config("copy map dimension mismatch".into()));
    }
    let n = data.x.ncols();
    let mut z = DMatrix::zeros(d, n);
    let a = map.rank();
    for i in 0..n {
        let ax = &map.a_mat * data.x.column(i);
        let by = &map.b_mat * data.y.column(i);
        for r in 0..a {
            z[(r, i)] = ax[r];
        }
        for r in 0..d - a {
            z[(a + r, i)] = by[r];
        }
    }
    Ok(&data.x * data.x.transpose() + &z * z.transpose())
}

/// Context-summary matrices of the value-skip model: the local head keeps
/// `G1`, the skip head sees raw values, `G2 = X X^T + Y Z^T`.
pub fn build_g2(
    data: &SequenceData,
    map: &CopyMap,
) -> Result<(DMatrix<f64>, DMatrix<f64>), MesaError> {
    let g1 = build_g1(data, map)?;
    let d = data.x.nrows();
    let n = data.x.ncols();
    let a = map.rank();
    let mut z = DMatrix::zeros(d, n);
    for i in 0..n {
        let ax = &map.a_mat * data.x.column(i);
        let by = &map.b_mat * data.y.column(i);
        for r in 0..a {
            z[(r, i)] = ax[r];
        }
        for r in 0..d - a {
            z[(a + r, i)] = by[r];
        }
    }
    let g2 = &data.x * data.x.transpose() + &data.y * z.transpose();
    Ok((g1, g2))
}

/// Closed-form ridge solve `W = Y X^T (X X^T + sigma^2 I)^{-1}` via a
/// symmetric positive-definite factorization (no explicit inverse).
pub fn ridge_predictor(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    sigma_sq: f64,
) -> Result<DMatrix<f64>, MesaError> {
    let d = x.nrows();
    let gram = x * x.transpose() + DMatrix::identity(d, d) * sigma_sq;
    let chol = gram
        .cholesky()
        .ok_or_else(|| MesaError::Numeric("ridge system is singular".into()))?;
    // W^T = (X X^T + s I)^{-1} X Y^T by symmetry of the Gram matrix.
    let rhs = x * y.transpose();
    Ok(chol.solve(&rhs).transpose())
}

/// Ridge from flat sufficient statistics.
pub(crate) fn ridge_from_stats(stats: &SampleStats, sigma_sq: f64) -> Result<DMatrix<f64>, MesaError> {
    let d = stats.d;
    let mut gram = DMatrix::zeros(d, d);
    let mut sxy = DMatrix::zeros(d, d);
    for r in 0..d {
        for c in 0..d {
            gram[(r, c)] = stats.sxx[r * d + c];
            sxy[(r, c)] = stats.sxy[r * d + c];
        }
    }
    for i in 0..d {
        gram[(i, i)] += sigma_sq;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| MesaError::Numeric("ridge system is singular".into()))?;
    Ok(chol.solve(&sxy).transpose())
}
