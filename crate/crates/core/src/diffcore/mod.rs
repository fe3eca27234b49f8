//! Dense tensors and a per-batch reverse-mode tape.
//!
//! Parameters carry a [`ParamGroup`]; a [`Scope`] node restricts which group
//! the gradient flowing through it may reach, and a stop-gradient scope cuts
//! it entirely. ReLU's derivative at exactly zero is taken as zero.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_graph, finite_difference_check, zero_coordinates, GradCheckReport};
pub use tape::{
    log_softmax_rows, softmax_rows, ConvGeom, CustomOp, GradientMap, ParamGroup, ParamId, PoolGeom, Scope, Tape, Var,
};
pub use tensor::Tensor;
