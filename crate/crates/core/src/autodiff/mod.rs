//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.

mod check;
pub(crate) mod conv;
mod graph;
pub mod linalg;
mod params;
mod tensor;

pub use check::{finite_diff_check, finite_diff_check_many};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use params::{Bound, GroupRole, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
