//! Dense matrix kernels, deterministic RNG, initialization, activations and
//! allocation accounting.

mod activation;
mod alloc;
mod matrix;
mod ops;
mod real;
mod rng;

pub use activation::{activation, activation_by_name, log_sigmoid, sigmoid, Activation};
pub use alloc::AllocMeter;
pub(crate) use alloc::active_meter;
pub use matrix::Matrix;
pub use ops::{
    add_column_inplace, column_softmax, elementwise, glorot_init, masked_exp_inplace, matmul,
    matmul_nt, matmul_tn, row_softmax, ElemOp,
};
pub(crate) use ops::softmax_slice_inplace;
pub use real::{DType, Real};
pub use rng::Rng;
