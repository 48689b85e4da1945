//! Pooling-by-vector-quantization for paired audio/MIDI feature sequences.
//!
//! Audio frames are quantized against a learned codebook, compressed window by
//! window with a pooling strategy picked from the number of distinct codes in
//! the window, fused with MIDI features through two stages of co-attention and
//! classified into four classes.

pub mod aggregation;
pub mod codebook;
pub mod data;
pub mod error;
pub mod formats;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod sweep;
pub mod train;

pub use aggregation::{compress, CompressedSequence, PoolStrategy, PoolingPlan, WindowSpec};
pub use codebook::{quantize, quantization_loss, Codebook, IndexSequence, InitBuffer, LossNorm};
pub use error::{Error, Result};
pub use fusion::{co_attention, two_stage_fuse, AttentionParams, FusionStack};
pub use model::{Architecture, ModelParams, PoolingMode, NUM_CLASSES};
pub use numerics::{Matrix, Rng};
pub use train::{train, train_on, TrainingConfig};
