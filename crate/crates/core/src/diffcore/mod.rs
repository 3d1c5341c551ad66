//! Dense float64 matrices and a small reverse-mode tape.
//!
//! Graphs are built once from a fixed primitive set ([`Op`]), evaluated with
//! [`Graph::forward`], and differentiated with [`Graph::grad`]. Gradients are
//! available for any node, not only leaves, which is what activation-level
//! attribution needs. [`finite_diff_grad`] is the independent oracle.

mod finite_diff;
mod graph;
mod tensor;

pub use finite_diff::{finite_diff_coordinate, finite_diff_grad};
pub use graph::{Bindings, Evaluation, Graph, Node, NodeId, Op};
pub use tensor::{log_softmax_rows, Tensor};
