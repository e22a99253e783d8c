//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! Graphs are built eagerly as ops execute. [`grad`] walks the graph in
//! reverse topological order; [`grad_graph`] does the same with recording
//! enabled so the result can be differentiated again, which is how [`hvp`]
//! obtains Hessian-vector products.
//!
//! Graphs live on the thread that built them (`Rc`-based); independent
//! graphs can be built on different threads concurrently.

mod backward;
pub mod numeric;
mod ops;
mod tensor;

pub use backward::{grad, grad_graph, hvp};
pub use ops::{cross_entropy_loss, mse_loss};
pub use tensor::{is_grad_enabled, no_grad, Tensor};
