//! Byte-level corpus handling: ingestion, tokenization (vocab 256), and a
//! deterministic block-wise train/validation split.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Byte-level vocabulary size.
pub const BYTE_VOCAB: usize = 256;

/// Split granularity in bytes. Training windows never cross block borders,
/// so the two splits share no token position.
pub const SPLIT_BLOCK: usize = 512;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus is empty")]
    Empty,
    #[error("no training block can hold a window of {0} tokens")]
    WindowTooLong(usize),
}

/// Tokenized corpus with a deterministic position-based split.
#[derive(Debug, Clone)]
pub struct Corpus {
    bytes: Vec<u8>,
    block: usize,
    train_blocks: Vec<usize>,
    val_blocks: Vec<usize>,
    val_fraction: f64,
}

/// Exact equidistribution rule: block `i` belongs to validation iff the
/// running quota `floor((i+1) v) - floor(i v)` ticks. Deterministic in the
/// block position alone; the realized fraction is within `1/N` of `v`.
fn is_val_block(i: usize, v: f64) -> bool {
    (((i + 1) as f64) * v).floor() > ((i as f64) * v).floor()
}

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>, val_fraction: f64) -> Result<Self, DataError> {
        if bytes.is_empty() {
            return Err(DataError::Empty);
        }
        let block = SPLIT_BLOCK.min(bytes.len());
        let n_blocks = bytes.len() / block;
        let mut train_blocks = Vec::new();
        let mut val_blocks = Vec::new();
        for i in 0..n_blocks {
            if is_val_block(i, val_fraction) {
                val_blocks.push(i);
            } else {
                train_blocks.push(i);
            }
        }
        Ok(Self { bytes, block, train_blocks, val_blocks, val_fraction })
    }

    /// Read a UTF-8 text file as a byte token stream.
    pub fn load(path: &Path, val_fraction: f64) -> Result<Self, DataError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(bytes, val_fraction)
    }

    pub fn tokens(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn block_size(&self) -> usize {
        self.block
    }

    pub fn train_block_count(&self) -> usize {
        self.train_blocks.len()
    }

    pub fn val_block_count(&self) -> usize {
        self.val_blocks.len()
    }

    /// Realized validation fraction over whole blocks.
    pub fn val_fraction_actual(&self) -> f64 {
        let total = self.train_blocks.len() + self.val_blocks.len();
        if total == 0 {
            0.0
        } else {
            self.val_blocks.len() as f64 / total as f64
        }
    }

    pub fn configured_val_fraction(&self) -> f64 {
        self.val_fraction
    }

    fn window_at(&self, block: usize, offset: usize, seq_len: usize) -> (Vec<usize>, Vec<usize>) {
        let start = block * self.block + offset;
        let w = &self.bytes[start..start + seq_len + 1];
        let tokens = w[..seq_len].iter().map(|&b| b as usize).collect();
        let targets = w[1..].iter().map(|&b| b as usize).collect();
        (tokens, targets)
    }

    /// Sample a next-token training window from the training split.
    pub fn sample_train_window(
        &self,
        rng: &mut ChaCha8Rng,
        seq_len: usize,
    ) -> Result<(Vec<usize>, Vec<usize>), DataError> {
        if seq_len + 1 > self.block || self.train_blocks.is_empty() {
            return Err(DataError::WindowTooLong(seq_len + 1));
        }
        let block = self.train_blocks[rng.gen_range(0..self.train_blocks.len())];
        let offset = rng.gen_range(0..=self.block - seq_len - 1);
        Ok(self.window_at(block, offset, seq_len))
    }

    /// Deterministic validation windows: non-overlapping windows per block,
    /// capped at `max_windows` (0 = no cap).
    pub fn val_windows(&self, seq_len: usize, max_windows: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut out = Vec::new();
        if seq_len + 1 > self.block {
            return out;
        }
        'outer: for &b in &self.val_blocks {
            let mut offset = 0;
            while offset + seq_len + 1 <= self.block {
                out.push(self.window_at(b, offset, seq_len));
                offset += seq_len + 1;
                if max_windows > 0 && out.len() >= max_windows {
                    break 'outer;
                }
            }
        }
        out
    }
}
