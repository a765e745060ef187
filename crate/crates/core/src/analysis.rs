//! Evaluation, layerwise linear probes, and head/token similarity analysis.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Corpus;
use crate::model::{forward_graph, register_tensors, Checkpoint, ModelError};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{validation_loss, AdamW, TrainError};

/// Mean token cross-entropy on the validation split and its exponential.
pub fn eval(
    ck: &Checkpoint,
    corpus: &Corpus,
    seq_len: usize,
    max_windows: usize,
) -> Result<(f64, f64), TrainError> {
    let loss = validation_loss(ck, corpus, seq_len, max_windows)?;
    Ok((loss, loss.exp()))
}

/// Probe training knobs. The probe is a layer normalization followed by a
/// linear head, trained on next-token prediction over frozen features.
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub val_windows: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 1e-2, batch: 4, seq_len: 32, seed: 11, val_windows: 32 }
    }
}

/// Train a normalization + linear head on the residual stream after block
/// `layer` (1-based) and report its validation loss.
pub fn probe(
    ck: &Checkpoint,
    corpus: &Corpus,
    layer: usize,
    pc: &ProbeConfig,
) -> Result<f64, TrainError> {
    let cfg = &ck.config;
    if layer == 0 || layer > cfg.layers {
        return Err(TrainError::Invalid(format!(
            "probe layer {layer} outside 1..={}",
            cfg.layers
        )));
    }
    let d = cfg.dim;
    let v = cfg.vocab;
    let mut head: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    head.insert("probe.gain".into(), Tensor::filled(vec![d], 1.0));
    head.insert("probe.bias".into(), Tensor::zeros(vec![d]));
    head.insert("probe.w".into(), Tensor::zeros(vec![v, d]));

    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed.wrapping_mul(0x2545f4914f6cdd1d));
    let mut opt = AdamW::new();

    for step in 0..pc.steps {
        let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        let mut any = false;
        for _ in 0..pc.batch {
            let (tokens, targets) = corpus.sample_train_window(&mut rng, pc.seq_len)?;
            let mut tape = Tape::<f32>::new();
            let model_vars = register_tensors(&mut tape, &ck.tensors);
            let out = forward_graph(&mut tape, cfg, &model_vars, &tokens)?;
            let feats = out.resid_after[layer - 1];
            let gain = tape.leaf(head["probe.gain"].clone());
            let bias = tape.leaf(head["probe.bias"].clone());
            let w = tape.leaf(head["probe.w"].clone());
            let normed = tape
                .layer_norm_cols(feats, gain, bias, crate::model::LN_EPS as f32)
                .map_err(ModelError::from)?;
            let logits = tape.matmul(w, normed).map_err(ModelError::from)?;
            let loss = tape.cross_entropy(logits, &targets).map_err(ModelError::from)?;
            let g = tape.backward(loss).map_err(ModelError::from)?;
            for (name, var) in [("probe.gain", gain), ("probe.bias", bias), ("probe.w", w)] {
                if let Some(gt) = g.get(var) {
                    match grads.get_mut(name) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(gt.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            grads.insert(name.to_string(), gt.clone());
                        }
                    }
                    any = true;
                }
            }
        }
        if !any {
            return Err(TrainError::Invalid(format!("probe step {step} saw no gradient")));
        }
        let inv_b = 1.0 / pc.batch as f32;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= inv_b;
            }
        }
        opt.step(&mut head, &grads, pc.lr, 0.0);
    }

    // Validation loss of the frozen-model probe.
    let windows = corpus.val_windows(pc.seq_len, pc.val_windows);
    if windows.is_empty() {
        return Err(TrainError::Invalid("no validation windows for probe".into()));
    }
    let mut total = 0.0;
    for (tokens, targets) in &windows {
        let mut tape = Tape::<f32>::new();
        let model_vars = register_tensors(&mut tape, &ck.tensors);
        let out = forward_graph(&mut tape, cfg, &model_vars, tokens)?;
        let feats = out.resid_after[layer - 1];
        let gain = tape.leaf(head["probe.gain"].clone());
        let bias = tape.leaf(head["probe.bias"].clone());
        let w = tape.leaf(head["probe.w"].clone());
        let normed = tape
            .layer_norm_cols(feats, gain, bias, crate::model::LN_EPS as f32)
            .map_err(ModelError::from)?;
        let logits = tape.matmul(w, normed).map_err(ModelError::from)?;
        let loss = tape.cross_entropy(logits, targets).map_err(ModelError::from)?;
        total += tape.value(loss).data()[0] as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Probe every layer; returns `(layer, probe validation loss)` rows.
pub fn probe_all(
    ck: &Checkpoint,
    corpus: &Corpus,
    pc: &ProbeConfig,
) -> Result<Vec<(usize, f64)>, TrainError> {
    (1..=ck.config.layers).map(|l| Ok((l, probe(ck, corpus, l, pc)?))).collect()
}

pub fn probe_csv(rows: &[(usize, f64)]) -> String {
    let mut s = String::from("layer,probe_val_loss\n");
    for (l, loss) in rows {
        s.push_str(&format!("{l},{loss}\n"));
    }
    s
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Head-head and token-token cosine similarity at `layer` (1-based),
/// averaged over a fixed evaluation batch from the validation split.
pub fn similarity(
    ck: &Checkpoint,
    corpus: &Corpus,
    layer: usize,
    seq_len: usize,
    batch_windows: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), TrainError> {
    let cfg = &ck.config;
    if layer == 0 || layer > cfg.layers {
        return Err(TrainError::Invalid(format!(
            "similarity layer {layer} outside 1..={}",
            cfg.layers
        )));
    }
    let windows = corpus.val_windows(seq_len, batch_windows.max(1));
    if windows.is_empty() {
        return Err(TrainError::Invalid("no validation windows for similarity".into()));
    }

    let mut head_sim: Option<Vec<Vec<f64>>> = None;
    let mut token_sim: Option<Vec<Vec<f64>>> = None;

    for (tokens, _) in &windows {
        let mut tape = Tape::<f32>::new();
        let vars = register_tensors(&mut tape, &ck.tensors);
        let out = forward_graph(&mut tape, cfg, &vars, tokens)?;

        // Per-head value outputs, flattened.
        let values: Vec<Vec<f64>> = out.head_values[layer - 1]
            .iter()
            .map(|&v| tape.value(v).data().iter().map(|&x| x as f64).collect())
            .collect();
        let h = values.len();
        let hs = head_sim.get_or_insert_with(|| vec![vec![0.0; h]; h]);
        for i in 0..h {
            for j in 0..h {
                hs[i][j] += cosine(&values[i], &values[j]);
            }
        }

        // Residual-stream token vectors.
        let resid = tape.value(out.resid_after[layer - 1]).clone();
        let n = resid.cols();
        let cols: Vec<Vec<f64>> = (0..n)
            .map(|j| (0..resid.rows()).map(|i| resid.at(i, j) as f64).collect())
            .collect();
        let ts = token_sim.get_or_insert_with(|| vec![vec![0.0; n]; n]);
        for i in 0..n {
            for j in 0..n {
                ts[i][j] += cosine(&cols[i], &cols[j]);
            }
        }
    }

    let k = windows.len() as f64;
    let mut hs = head_sim.unwrap();
    for row in hs.iter_mut() {
        for v in row.iter_mut() {
            *v /= k;
        }
    }
    let mut ts = token_sim.unwrap();
    for row in ts.iter_mut() {
        for v in row.iter_mut() {
            *v /= k;
        }
    }
    Ok((hs, ts))
}

pub fn matrix_csv(m: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for row in m {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}
