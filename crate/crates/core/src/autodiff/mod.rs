//! Reverse-mode automatic differentiation over a define-by-run graph.
//!
//! Gradients are returned as graph nodes, so differentiating a function of
//! gradients (an unrolled gradient step, for instance) needs nothing beyond a
//! second [`Graph::grad`] call.

mod graph;
pub mod gradcheck;
mod optim;
mod params;
mod tensor;

pub use graph::{GradMode, Graph, Node, NodeId, Op};
pub use optim::{AdamConfig, AdamState};
pub use params::{sgd_step, ParamLayout, ParamNodes, ParamVector, Segment};
pub use tensor::Tensor;
