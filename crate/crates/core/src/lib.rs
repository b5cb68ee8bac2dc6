//! A self-contained deep-learning pipeline framework built around four ideas:
//!
//! - lazy tensor data columns that defer fetching and preprocessing until
//!   materialization,
//! - a typed operator-graph language with distinct train and predict phases,
//! - neural networks elaborated from generating graphs with shape inference,
//! - a callback-hooked training loop with validation, early stopping,
//!   hyperparameter spaces, random-search tuning and resampling.
//!
//! The crate is CPU-only and deterministic: all randomness flows through the
//! counter-based [`rng::RngState`].
//!
//! With the default `parallel` feature, resampling folds and tuning
//! evaluations run on a rayon pool; without it the same entry points fall
//! back to sequential execution.

pub mod data;
pub mod error;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod exec;
pub mod learner;
pub mod netgraph;
pub mod rng;
pub mod tensor;
pub mod tune;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::{Element, Fill, Tensor};
