//! Transferable ensemble adversaries, alpha-mix defenses and loss-landscape
//! analysis on a small reverse-mode autodiff engine.

pub mod analysis;
pub mod attacks;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod models;
pub mod nn;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;

pub use data::{LabeledDataset, MixConfig};
pub use error::{CheckpointError, DataError, Error, Result};
pub use models::{Architecture, Model, ModelSpec};
pub use tape::{finite_diff_check, Gradients, Tape, Var};
pub use tensor::Tensor;
