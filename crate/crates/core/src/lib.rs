//! Attention-guided masked-language-model training at desk scale.
//!
//! A self-contained tensor/autodiff engine, a small post-LN transformer
//! encoder, row-stochastic guidance pattern targets, and a trainer that adds
//! a decaying attention-guidance MSE term to the MLM objective. Everything
//! is seed-deterministic on a single thread.

pub mod checkpoint;
pub mod corpus;
pub mod data;
pub mod error;
pub mod fdcheck;
pub mod kernels;
pub mod model;
pub mod objective;
pub mod patterns;
pub mod probe;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{derive_seed, MaskedBatch, Vocab};
pub use error::{Error, Result};
pub use model::{AttentionTrace, ModelConfig, ParameterStore};
pub use objective::GuidanceConfig;
pub use patterns::{build_pattern, PatternKind, PatternMatrix};
pub use probe::{ProbeExample, ProbeReport};
pub use tape::{NodeId, Tape};
pub use tensor::{Scalar, Tensor};
pub use trainer::{AdamState, TrainConfig, TrainMetrics};
