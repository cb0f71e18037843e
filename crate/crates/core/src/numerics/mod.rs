//! Differentiable dense-array substrate and gradient verification.

mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, Var, NORM_FLOOR};
pub use kernels::{cosine, dot, l2_norm, layer_norm, log_softmax, softmax, LN_EPS};
pub use params::{Param, ParamId, ParamStore, Trainable};
pub use tensor::{Scalar, Tensor};
