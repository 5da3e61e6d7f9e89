//! Minimal f64 tensor + reverse-mode autodiff engine.
//!
//! Just enough machinery for the denoiser backbone: dense/conv/attention
//! primitives with hand-written backward passes, recorded on a per-pass tape.
//! Values are eagerly computed; [`graph::Graph::backward`] walks the tape in
//! reverse accumulating gradients for leaves that requested them.
//!
//! Everything is deterministic: parallel sections only ever write disjoint
//! output ranges with fixed split points, so multi-threaded runs are
//! bit-identical to single-threaded ones.

pub mod gemm;
pub mod graph;
pub mod tensor;

pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
