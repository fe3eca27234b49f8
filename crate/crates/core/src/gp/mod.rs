//! Exact GP regression over an anchor set with an RBF kernel.
//!
//! One Cholesky factor is shared by the `C` independent regressions on the
//! one-hot anchor labels. Gradients flow into the query feature only.

mod cholesky;
mod kernel;
pub mod oracle;
mod posterior;
pub mod selftest;

pub use cholesky::{
    cholesky, cholesky_solve, cholesky_with_jitter, solve_lower, solve_upper_transposed,
    CholeskyFactor,
};
pub use kernel::{
    kernel_matrix, kernel_vector, rbf_kernel, squared_distance, KernelConfig,
    REFERENCE_LENGTH_SCALE_10_CLASS, REFERENCE_LENGTH_SCALE_MANY_CLASS,
};
pub use posterior::{one_hot, record_posterior_mean, GpSnapshot, Posterior, SnapshotDump, VARIANCE_CLAMP};
