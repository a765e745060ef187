//! Convert a trained standard-attention checkpoint into a value-skip
//! checkpoint: layers beyond the first get their local value heads rebuilt
//! by pooling, norm-ranked selection, or a rank-truncated factorization of
//! the combined output-value circuit. Layer 1 is preserved verbatim.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::attn::HeadInjection;
use crate::config::VariantKind;
use crate::data::Corpus;
use crate::model::{Checkpoint, ModelError};
use crate::tensor::Tensor;
use crate::train::{validation_loss, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConversionStrategy {
    /// Average value-head pairs (default).
    MeanV,
    /// Average value-head pairs and the matching output columns; zero the
    /// remaining output columns.
    MeanVO,
    /// Keep the value heads with the largest Frobenius norm.
    TopV,
    /// Keep the top-norm value heads and top-norm output column blocks.
    TopVO,
    /// Best rank-(H'/H) factorization of the output-value product.
    Svd,
}

impl ConversionStrategy {
    pub const ALL: [ConversionStrategy; 5] = [
        ConversionStrategy::MeanV,
        ConversionStrategy::MeanVO,
        ConversionStrategy::TopV,
        ConversionStrategy::TopVO,
        ConversionStrategy::Svd,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ConversionStrategy::MeanV => "meanv",
            ConversionStrategy::MeanVO => "meanvo",
            ConversionStrategy::TopV => "topv",
            ConversionStrategy::TopVO => "topvo",
            ConversionStrategy::Svd => "svd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "meanv" => Some(Self::MeanV),
            "meanvo" => Some(Self::MeanVO),
            "topv" => Some(Self::TopV),
            "topvo" => Some(Self::TopVO),
            "svd" => Some(Self::Svd),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConvertError {
    #[error("conversion expects a standard multi-head checkpoint, got '{0}'")]
    WrongVariant(String),
    #[error("conversion at ratio 0.5 requires an even head count, got {0}")]
    OddHeads(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

fn row_block(t: &Tensor<f32>, block: usize, d_h: usize) -> Vec<f32> {
    let cols = t.cols();
    t.data()[block * d_h * cols..(block + 1) * d_h * cols].to_vec()
}

fn col_block(t: &Tensor<f32>, block: usize, d_h: usize) -> Vec<f32> {
    let rows = t.rows();
    let mut out = Vec::with_capacity(rows * d_h);
    for r in 0..rows {
        for c in block * d_h..(block + 1) * d_h {
            out.push(t.at(r, c));
        }
    }
    out
}

fn frob(block: &[f32]) -> f64 {
    block.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Indices of the `keep` largest-norm blocks, in original order. Ties keep
/// the lower index.
fn top_indices(norms: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));
    let mut selected: Vec<usize> = order[..keep].to_vec();
    selected.sort_unstable();
    selected
}

/// Stack row blocks of width `d_h` into a new matrix.
fn stack_rows(blocks: &[Vec<f32>], d_h: usize, cols: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(blocks.len() * d_h * cols);
    for b in blocks {
        data.extend_from_slice(b);
    }
    Tensor::new(vec![blocks.len() * d_h, cols], data).expect("block stack")
}

/// Write a column block into a matrix.
fn set_col_block(t: &mut Tensor<f32>, block: usize, d_h: usize, data: &[f32]) {
    let rows = t.rows();
    for r in 0..rows {
        for j in 0..d_h {
            *t.at_mut(r, block * d_h + j) = data[r * d_h + j];
        }
    }
}

/// Convert a standard multi-head checkpoint into a half-skip checkpoint.
/// Layers 2..L get `H/2` local value heads built per strategy; every other
/// tensor is copied bit-for-bit, layer 1 included.
pub fn convert(ck: &Checkpoint, strategy: ConversionStrategy) -> Result<Checkpoint, ConvertError> {
    if ck.config.variant != VariantKind::Mha {
        return Err(ConvertError::WrongVariant(ck.config.variant.name().to_string()));
    }
    let heads = ck.config.heads;
    if heads % 2 != 0 {
        return Err(ConvertError::OddHeads(heads));
    }
    let d_h = ck.config.head_dim();
    let d = ck.config.dim;
    let hp = heads / 2;

    let mut out = ck.clone();
    out.config.variant = VariantKind::SkipV1;
    out.config.skip_ratio = 0.5;
    out.config.injection = HeadInjection::SecondHalf;

    for l in 2..=ck.config.layers {
        let wv_name = format!("layer{l}.attn.w_v");
        let wo_name = format!("layer{l}.attn.w_o");
        let wv = &ck.tensors[&wv_name];
        let wo = &ck.tensors[&wo_name];
        let v_blocks: Vec<Vec<f32>> = (0..heads).map(|h| row_block(wv, h, d_h)).collect();

        let (new_wv, new_wo) = match strategy {
            ConversionStrategy::MeanV => {
                let pooled: Vec<Vec<f32>> = (0..hp)
                    .map(|i| {
                        v_blocks[2 * i]
                            .iter()
                            .zip(&v_blocks[2 * i + 1])
                            .map(|(a, b)| (a + b) * 0.5)
                            .collect()
                    })
                    .collect();
                (stack_rows(&pooled, d_h, d), None)
            }
            ConversionStrategy::MeanVO => {
                let pooled: Vec<Vec<f32>> = (0..hp)
                    .map(|i| {
                        v_blocks[2 * i]
                            .iter()
                            .zip(&v_blocks[2 * i + 1])
                            .map(|(a, b)| (a + b) * 0.5)
                            .collect()
                    })
                    .collect();
                let mut wo_new = Tensor::zeros(vec![d, d]);
                for i in 0..hp {
                    let a = col_block(wo, 2 * i, d_h);
                    let b = col_block(wo, 2 * i + 1, d_h);
                    let avg: Vec<f32> =
                        a.iter().zip(&b).map(|(x, y)| (x + y) * 0.5).collect();
                    set_col_block(&mut wo_new, i, d_h, &avg);
                }
                // Remaining output columns stay zero.
                (stack_rows(&pooled, d_h, d), Some(wo_new))
            }
            ConversionStrategy::TopV => {
                let norms: Vec<f64> = v_blocks.iter().map(|b| frob(b)).collect();
                let selected = top_indices(&norms, hp);
                let picked: Vec<Vec<f32>> =
                    selected.iter().map(|&i| v_blocks[i].clone()).collect();
                (stack_rows(&picked, d_h, d), None)
            }
            ConversionStrategy::TopVO => {
                let v_norms: Vec<f64> = v_blocks.iter().map(|b| frob(b)).collect();
                let v_sel = top_indices(&v_norms, hp);
                let picked: Vec<Vec<f32>> = v_sel.iter().map(|&i| v_blocks[i].clone()).collect();

                let o_blocks: Vec<Vec<f32>> = (0..heads).map(|h| col_block(wo, h, d_h)).collect();
                let o_norms: Vec<f64> = o_blocks.iter().map(|b| frob(b)).collect();
                let o_sel = top_indices(&o_norms, hp);
                let mut wo_new = Tensor::zeros(vec![d, d]);
                for (slot, &i) in o_sel.iter().enumerate() {
                    set_col_block(&mut wo_new, slot, d_h, &o_blocks[i]);
                }
                let rest: Vec<usize> = (0..heads).filter(|i| !o_sel.contains(i)).collect();
                for (offset, &i) in rest.iter().enumerate() {
                    set_col_block(&mut wo_new, hp + offset, d_h, &o_blocks[i]);
                }
                (stack_rows(&picked, d_h, d), Some(wo_new))
            }
            ConversionStrategy::Svd => {
                // Best rank-(hp * d_h) factorization of W_O W_V, split back
                // into head blocks: local output columns carry U sqrt(S),
                // local value rows carry sqrt(S) V^T.
                let product = DMatrix::<f64>::from_fn(d, d, |r, c| {
                    let mut acc = 0.0f64;
                    for k in 0..d {
                        acc += wo.at(r, k) as f64 * wv.at(k, c) as f64;
                    }
                    acc
                });
                let svd = product.svd(true, true);
                let u = svd.u.as_ref().expect("left vectors");
                let vt = svd.v_t.as_ref().expect("right vectors");
                let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
                order.sort_by(|&a, &b| {
                    svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap()
                });
                let rank = hp * d_h;
                let mut wo_new = wo.clone();
                let mut wv_rows = vec![0.0f32; rank * d];
                for (j, &si) in order[..rank].iter().enumerate() {
                    let s_sqrt = svd.singular_values[si].max(0.0).sqrt();
                    for r in 0..d {
                        let slot = j / d_h;
                        let col = slot * d_h + (j % d_h);
                        *wo_new.at_mut(r, col) = (u[(r, si)] * s_sqrt) as f32;
                    }
                    for c in 0..d {
                        wv_rows[j * d + c] = (s_sqrt * vt[(si, c)]) as f32;
                    }
                }
                // Skip-slot output columns keep their original blocks.
                (Tensor::new(vec![rank, d], wv_rows).expect("svd rows"), Some(wo_new))
            }
        };

        out.tensors.insert(wv_name, new_wv);
        if let Some(wo_new) = new_wo {
            out.tensors.insert(wo_name, wo_new);
        }
    }

    out.validate()?;
    Ok(out)
}

/// Evaluate converted checkpoints' validation loss before any uptraining.
/// Returns `(strategy name, loss)` rows in the given order.
pub fn initial_loss_compare(
    ck: &Checkpoint,
    corpus: &Corpus,
    strategies: &[ConversionStrategy],
    seq_len: usize,
    max_windows: usize,
) -> Result<Vec<(String, f64)>, ConvertError> {
    let mut rows = Vec::with_capacity(strategies.len());
    for &s in strategies {
        let converted = convert(ck, s)?;
        let loss = validation_loss(&converted, corpus, seq_len, max_windows)?;
        rows.push((s.name().to_string(), loss));
    }
    Ok(rows)
}

/// CSV for the initial-loss comparison: `strategy,initial_val_loss`.
pub fn initial_loss_csv(rows: &[(String, f64)]) -> String {
    let mut s = String::from("strategy,initial_val_loss\n");
    for (name, loss) in rows {
        s.push_str(&format!("{name},{loss}\n"));
    }
    s
}
