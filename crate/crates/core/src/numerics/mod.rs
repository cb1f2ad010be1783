//! Dense kernels shared by every other module: row-major matrices, the
//! softmax cross-entropy loss, the Adam optimizer and the splitmix64 RNG.

mod adam;
mod loss;
mod matrix;
mod rng;

pub use adam::{AdamState, BETA1, BETA2, EPSILON};
pub use loss::{softmax_cross_entropy, softmax_rows, LossOutput};
pub use matrix::Matrix;
pub use rng::{mix64, RngState};
