pub mod baselines;
pub mod config;
pub mod error;
pub mod expres;
pub mod format;
pub mod gradcheck;
pub mod graph;
pub mod seed;
pub mod tasks;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
