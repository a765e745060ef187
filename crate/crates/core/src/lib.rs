//! Desk-scale transformer laboratory built around cross-layer value reuse:
//! attention variants that route layer-1 values into deeper layers, exact
//! KV-cache and parameter accounting, checkpoint conversion for uptraining,
//! a byte-level training harness, and a Monte-Carlo bench for the two-layer
//! linear-attention regression model.

pub mod analysis;
pub mod attn;
pub mod cache;
pub mod ckpt_io;
pub mod config;
pub mod convert;
pub mod data;
pub mod mesa;
pub mod model;
pub mod presets;
pub mod tape;
pub mod tensor;
pub mod train;

pub use attn::{AttnWeights, HeadInjection, HeadMap, HeadSource, MlaWeights};
pub use config::{param_count, ModelConfig, ParamBreakdown, Positional, VariantKind};
pub use model::{init_weights, Checkpoint, ModelError};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{NumericError, Scalar, Tensor};
