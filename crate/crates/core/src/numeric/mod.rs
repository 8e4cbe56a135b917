//! Dense `f64` primitives with explicit adjoints, a finite-difference checker
//! and plain SGD.

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{finite_diff_grad_check, grad_check_params, GradCheckReport};
pub use ops::{
    cosine_sim, cosine_sim_grad, layer_norm, layer_norm_backward, linear_backward, linear_forward, relu,
    softmax_temp, softmax_temp_backward, LayerNormParams, LinearGrads,
};
pub use optim::{sgd_step, sgd_update};
pub use params::ParamSet;
pub use tensor::{Matrix, Vector};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;
