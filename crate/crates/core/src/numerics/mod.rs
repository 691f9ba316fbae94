//! Dense-array math: [`ValueGrid`], the seeded [`Rng`], stable softmax and
//! softmin, and the finite-difference gradient oracle.

mod grid;
pub mod gradcheck;
mod rng;
mod stable;

pub use grid::{dot, norm, ValueGrid, GRID_MAGIC};
pub use gradcheck::{central_difference, finite_diff_grad, max_relative_error, relative_error};
pub use rng::Rng;
pub use stable::{log_softmax_row, log_sum_exp, softmax_into, softmax_rows, softmin};
pub(crate) use stable::softmin_unchecked;
