//! Minimal reverse-mode differentiable arrays.
//!
//! Only the operations the CMAE networks and losses need are provided.
//! Everything runs in `f64`; [`grad_check`] compares analytic gradients
//! against central finite differences.

mod array;
mod attention;
mod check;
mod graph;

pub use array::DArray;
pub use attention::{attention, attention_with_weights};
pub use check::{grad_check, GradCheckReport, DEFAULT_STEP};
pub use graph::{Graph, Var, LAYER_NORM_EPS};

#[cfg(test)]
mod tests;
