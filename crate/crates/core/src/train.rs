//! Training loop: decoupled-weight-decay adaptive-moment optimizer, linear
//! warmup with cosine decay, gradient clipping, and CSV run logging.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::ckpt_io::config_to_kv;
use crate::config::ModelConfig;
use crate::data::{Corpus, DataError};
use crate::model::{init_weights, loss_graph, Checkpoint, ModelError};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged (non-finite loss) at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid train config: {0}")]
    Invalid(String),
}

/// Full harness configuration for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub peak_lr: f64,
    /// Fraction of steps spent in linear warmup.
    pub warmup_frac: f64,
    /// Cosine decay floor as a fraction of the peak rate.
    pub floor_frac: f64,
    pub weight_decay: f64,
    /// Global-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub val_fraction: f64,
    /// Validation cadence in steps (0 = final evaluation only).
    pub val_every: usize,
    /// Upper bound on validation windows per evaluation (0 = all).
    pub val_windows: usize,
}

impl TrainConfig {
    pub fn desk_defaults(model: ModelConfig) -> Self {
        Self {
            model,
            steps: 2000,
            batch: 8,
            seq_len: 64,
            peak_lr: 1e-3,
            warmup_frac: 0.1,
            floor_frac: 0.1,
            weight_decay: 0.1,
            grad_clip: 1.0,
            seed: 7,
            val_fraction: 0.1,
            val_every: 200,
            val_windows: 64,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 {
            return Err(TrainError::Invalid("steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(TrainError::Invalid("warmup fraction must be in [0, 1)".into()));
        }
        if !(self.floor_frac > 0.0 && self.floor_frac <= 1.0) {
            return Err(TrainError::Invalid("floor fraction must be in (0, 1]".into()));
        }
        if self.batch == 0 || self.seq_len == 0 {
            return Err(TrainError::Invalid("batch and sequence length must be positive".into()));
        }
        Ok(())
    }

    /// Config echo header for self-describing CSV outputs.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for line in config_to_kv(&self.model).lines() {
            s.push_str("# model.");
            s.push_str(line);
            s.push('\n');
        }
        s.push_str(&format!("# steps={}\n", self.steps));
        s.push_str(&format!("# batch={}\n", self.batch));
        s.push_str(&format!("# seq_len={}\n", self.seq_len));
        s.push_str(&format!("# peak_lr={}\n", self.peak_lr));
        s.push_str(&format!("# warmup_frac={}\n", self.warmup_frac));
        s.push_str(&format!("# floor_frac={}\n", self.floor_frac));
        s.push_str(&format!("# weight_decay={}\n", self.weight_decay));
        s.push_str(&format!("# grad_clip={}\n", self.grad_clip));
        s.push_str(&format!("# seed={}\n", self.seed));
        s.push_str(&format!("# val_fraction={}\n", self.val_fraction));
        s
    }
}

/// Linear warmup to the peak rate, then cosine decay to `floor_frac * peak`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let warmup = (cfg.warmup_frac * cfg.steps as f64).floor() as usize;
    if step < warmup {
        return cfg.peak_lr * (step + 1) as f64 / warmup as f64;
    }
    let span = (cfg.steps - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    let floor = cfg.peak_lr * cfg.floor_frac;
    floor + 0.5 * (cfg.peak_lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_ms: u128,
}

/// Per-step training log. Rows are strictly increasing in step.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub config_echo: String,
    pub rows: Vec<LogRow>,
}

impl RunLog {
    /// Full CSV including the wall-time column (last).
    pub fn to_csv(&self) -> String {
        let mut s = self.config_echo.clone();
        s.push_str("step,lr,train_loss,val_loss,wall_ms\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step,
                fmt_f64(r.lr),
                fmt_f64(r.train_loss),
                r.val_loss.map(fmt_f64).unwrap_or_default(),
                r.wall_ms
            ));
        }
        s
    }

    /// CSV with the wall-time column dropped; the determinism contract is
    /// stated over this form.
    pub fn to_csv_stable(&self) -> String {
        let mut s = self.config_echo.clone();
        s.push_str("step,lr,train_loss,val_loss\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.step,
                fmt_f64(r.lr),
                fmt_f64(r.train_loss),
                r.val_loss.map(fmt_f64).unwrap_or_default(),
            ));
        }
        s
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest round-trippable decimal form.
    format!("{v}")
}

/// Decoupled-weight-decay adaptive-moment optimizer state.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: BTreeMap<String, Tensor<f32>>,
    v: BTreeMap<String, Tensor<f32>>,
}

impl AdamW {
    pub fn new() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Apply one update. `grads` maps parameter names to mean gradients.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<f32>>,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr: f64,
        weight_decay: f64,
    ) {
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("parameter exists");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i] as f64;
                let mi = b1 * md[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * vd[i] as f64 + (1.0 - b2) * gi * gi;
                md[i] = mi as f32;
                vd[i] = vi as f32;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let mut w = pd[i] as f64;
                w -= lr * weight_decay * w;
                w -= lr * mhat / (vhat.sqrt() + self.eps);
                pd[i] = w as f32;
            }
        }
    }
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new()
    }
}

/// Mean validation loss over (up to) `max_windows` deterministic windows.
pub fn validation_loss(
    ck: &Checkpoint,
    corpus: &Corpus,
    seq_len: usize,
    max_windows: usize,
) -> Result<f64, TrainError> {
    let windows = corpus.val_windows(seq_len, max_windows);
    if windows.is_empty() {
        return Err(TrainError::Data(DataError::WindowTooLong(seq_len + 1)));
    }
    // Parallel forward with a fixed reduction order.
    let losses: Vec<f64> = windows
        .par_iter()
        .map(|(tokens, targets)| -> Result<f64, ModelError> {
            let mut tape = Tape::<f32>::new();
            let (loss, _) = loss_graph(&mut tape, &ck.config, &ck.tensors, tokens, targets)?;
            Ok(tape.value(loss).data()[0] as f64)
        })
        .collect::<Result<_, _>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Train from a fresh initialization.
pub fn train(cfg: &TrainConfig, corpus: &Corpus) -> Result<(Checkpoint, RunLog), TrainError> {
    let ck = init_weights(&cfg.model, cfg.seed)?;
    train_from(cfg, corpus, ck)
}

/// Continue training from an existing checkpoint (used for uptraining
/// converted models). Deterministic given config and seed.
pub fn train_from(
    cfg: &TrainConfig,
    corpus: &Corpus,
    mut ck: Checkpoint,
) -> Result<(Checkpoint, RunLog), TrainError> {
    cfg.validate()?;
    ck.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e3779b97f4a7c15));
    let mut opt = AdamW::new();
    let mut rows = Vec::with_capacity(cfg.steps);
    let started = Instant::now();

    for step in 0..cfg.steps {
        // Fixed draw order: the whole batch comes from one RNG stream.
        let batch: Vec<(Vec<usize>, Vec<usize>)> = (0..cfg.batch)
            .map(|_| corpus.sample_train_window(&mut rng, cfg.seq_len))
            .collect::<Result<_, _>>()?;

        // Parallel forward/backward; gradients reduced in batch order.
        let results: Vec<Result<(f64, BTreeMap<String, Tensor<f32>>), ModelError>> = batch
            .par_iter()
            .map(|(tokens, targets)| {
                let mut tape = Tape::<f32>::new();
                let (loss, vars) =
                    loss_graph(&mut tape, &cfg.model, &ck.tensors, tokens, targets)?;
                let loss_val = tape.value(loss).data()[0] as f64;
                let grads = tape.backward(loss)?;
                let mut out = BTreeMap::new();
                for (name, var) in &vars {
                    if let Some(g) = grads.get(*var) {
                        out.insert(name.clone(), g.clone());
                    }
                }
                Ok((loss_val, out))
            })
            .collect();

        let mut mean_loss = 0.0;
        let mut acc: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for r in results {
            let (loss_val, grads) = r?;
            mean_loss += loss_val;
            for (name, g) in grads {
                match acc.get_mut(&name) {
                    Some(t) => {
                        for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        acc.insert(name, g);
                    }
                }
            }
        }
        mean_loss /= cfg.batch as f64;
        if !mean_loss.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        let inv_b = 1.0 / cfg.batch as f32;
        for g in acc.values_mut() {
            for v in g.data_mut() {
                *v *= inv_b;
            }
        }

        // Global-norm clip.
        if cfg.grad_clip > 0.0 {
            let mut sq = 0.0f64;
            for g in acc.values() {
                for &v in g.data() {
                    sq += (v as f64) * (v as f64);
                }
            }
            let norm = sq.sqrt();
            if norm > cfg.grad_clip {
                let scale = (cfg.grad_clip / norm) as f32;
                for g in acc.values_mut() {
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                }
            }
        }

        let lr = lr_at(cfg, step);
        opt.step(&mut ck.tensors, &acc, lr, cfg.weight_decay);

        let val_loss = if cfg.val_every > 0 && (step + 1) % cfg.val_every == 0 {
            Some(validation_loss(&ck, corpus, cfg.seq_len, cfg.val_windows)?)
        } else {
            None
        };
        rows.push(LogRow {
            step,
            lr,
            train_loss: mean_loss,
            val_loss,
            wall_ms: started.elapsed().as_millis(),
        });
    }

    // Final validation row if the cadence missed the last step.
    if rows.last().map(|r| r.val_loss.is_none()).unwrap_or(false) {
        let v = validation_loss(&ck, corpus, cfg.seq_len, cfg.val_windows)?;
        if let Some(last) = rows.last_mut() {
            last.val_loss = Some(v);
        }
    }

    let log = RunLog { config_echo: cfg.echo(), rows };
    Ok((ck, log))
}
