//! A small reverse-mode automatic differentiation engine over dense
//! row-major matrices, generic over `f32` / `f64`.
//!
//! Ops are coarse: convolutions, deformable sampling and attention are single
//! fused nodes with hand-written backward passes, each covered by a
//! finite-difference test.

mod attention;
pub mod check;
mod graph;
mod index;
mod ops;
mod reduce;
mod tensor;

pub use attention::{normalized_to_pixel, segment_attention_weights, MapDims, Segments};
pub(crate) use attention::bilinear_taps;
pub use graph::{with_sign_fault, GradSink, Gradients, Graph, ParamId, ParamStore, Var, OP_NAMES};
pub use index::{Csr, NeighborTable, NO_NEIGHBOR};
pub use ops::{softmax_into, softmax_rows};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests;
