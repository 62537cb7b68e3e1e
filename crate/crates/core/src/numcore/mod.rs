//! Dense-tensor math, feed-forward networks with manual backpropagation,
//! and the two distillation losses with exact gradients.

pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod net;
pub mod tensor;

pub use gradcheck::grad_check;
pub use io::{load_params, params_from_bytes, params_to_bytes, save_params};
pub use loss::{ce_loss, ce_loss_class, kd_loss, softmax_temp, LossValue};
pub use net::{
    backward, backward_from_trace, forward, forward_trace, init_params, Activation, ForwardTrace,
    Layer, ModelParams, Optimizer, OptimizerKind,
};
pub use tensor::{argmax, dot, matvec, matvec_transpose, norm2, Tensor};
