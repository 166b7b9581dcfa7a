//! Lifelong language learning with generative replay.
//!
//! One small causal language model learns a stream of question-answering
//! tasks and, before each new task, writes pseudo-samples of the earlier
//! ones to train on alongside the new data.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod replay;
pub mod sampling;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
