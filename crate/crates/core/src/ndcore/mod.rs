//! Dense matrices and the reverse-mode tape that trains every layer.

pub mod gradcheck;
pub mod matrix;
pub mod tape;

pub use gradcheck::{compare_gradient, finite_diff_check};
pub use matrix::Matrix;
pub use tape::{Node, Tape, Var};
