//! Reverse-mode automatic differentiation, parameter storage, Adam, and a
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
mod graph;
mod store;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, ForwardOutput};
pub use graph::{Graph, GradientMap, Primitive, SgBank, Tensor};
pub use store::{Binder, ParamData, ParamStore};

#[cfg(test)]
mod tests;
