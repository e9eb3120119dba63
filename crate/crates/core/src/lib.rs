//! Text-audio retrieval with text-aware attention pooling and a
//! prior-matrix-revised contrastive loss, on top of a small reverse-mode
//! differentiation engine.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objective;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use model::{ModelDims, ModelParams, Pooling, RetrievalModel, TapParams};
pub use objective::{LossConfig, LossKind, SimilarityMatrix};
pub use ops::Axis;
pub use tensor::Tensor;
