//! Domain-generalization and adaptation lab for semantic segmentation on
//! procedurally rendered street scenes.

pub mod experiments;
pub mod losses;
pub mod metrics;
pub mod mixup;
pub mod rng;
pub mod scenegen;
pub mod segmodel;
pub mod tensor;
pub mod trainer;

pub use tensor::{Graph, NodeId, Tensor, TensorError};
