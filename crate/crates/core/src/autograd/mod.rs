//! Minimal reverse-mode automatic differentiation over dense `f64`
//! matrices.

mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{AttnGroup, AttnLayout, Graph, MixRows, Var};
pub use params::{Param, ParamStore};
pub use tensor::Tensor;

use crate::error::Result;

/// Backpropagates `loss` through `graph` and accumulates gradients of the
/// non-frozen parameters into `store`. Gradients add up across calls
/// until [`ParamStore::zero_grad`].
pub fn backward(graph: &mut Graph, loss: Var, store: &mut ParamStore) -> Result<()> {
    graph.backward_into(loss, store)
}
