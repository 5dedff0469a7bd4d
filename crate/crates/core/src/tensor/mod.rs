//! Dense matrices, a reverse-mode tape, Adam, and a small SVD.

mod adam;
mod gradcheck;
mod matrix;
mod svd;
mod tape;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use matrix::Matrix;
pub use svd::{singular_values, svd, Svd, MAX_SWEEPS};
pub use tape::{stable_sigmoid, Axis, Elementwise, ReduceKind, Tape, Var};
