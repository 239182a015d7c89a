//! Slot-based mixed open-set recognition.

pub mod ans;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod loss;
pub mod matching;
pub mod nn;
pub mod optim;
pub mod osod;
pub mod pipeline;
pub mod scoring;
pub mod slot;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
