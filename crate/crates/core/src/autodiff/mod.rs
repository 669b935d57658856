//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every op as it is evaluated; [`Graph::backward`]
//! sweeps the recording in reverse and accumulates gradients into tracked
//! leaves. Graphs are single-threaded; independent graphs may live on
//! different threads.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{grad_check, grad_check_inputs, relative_error, CheckReport, Offender};
pub use graph::{Graph, Var, POLE_EPS};
pub use kernels::{normalized_to_pixel, pixel_to_normalized, sigmoid, Padding};
pub use tensor::Tensor;
