//! Dense f64 tensor algebra with reverse-mode automatic differentiation.
//!
//! The substrate is deliberately minimal: just enough operations to express
//! the full forecasting network, each with a hand-written backward rule.
//! All reductions run in a fixed left-to-right order so that identical
//! inputs produce bit-identical outputs.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Graph, KernelScope, MacCounters, NodeId};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
