//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! A [`Tape`] records one forward computation; [`Var`] handles point at its
//! nodes. Parameters live in a [`ParamStore`] and are bound to a tape with
//! [`Tape::param`]. [`finite_difference_check`] verifies the analytic
//! gradients of any tape-built scalar function.

mod gradcheck;
pub mod io;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, FdConfig, FdReport, FdWorst};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{concat, stack, Tape, Var};
pub use tensor::Tensor;
