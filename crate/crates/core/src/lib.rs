//! Temporal-spatial mapping (TSM) for sequence classification.
//!
//! Per-frame feature vectors are stacked row by row into a [`VideoMap`], which
//! a shallow convolutional [`HeadModel`] with hierarchical temporal attention
//! classifies. The crate carries its own small reverse-mode tensor library,
//! SGD training with step decay, synthetic benchmark tasks, and the
//! evaluation tools (order-invariant baseline, late fusion, density sweeps).

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;
pub mod tsm;

pub use config::RunConfig;
pub use data::{Dataset, TaskKind, TaskSpec};
pub use error::{Result, TsmError};
pub use eval::{EvalReport, MeanPoolBaseline};
pub use model::{AttentionLevels, AttentionSet, HeadModel, ModelConfig};
pub use tensor::{Tape, Tensor, Var};
pub use tsm::{FeatureSequence, VideoMap};
