//! Dense 3D kernels with reverse-mode differentiation.

pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use kernels::{conv_out_dims, Partition};
pub use tape::{sigmoid, Grads, ParamGrads, ParamId, ParamStore, Parameter, Tape, Var};
pub use tensor::Tensor;
