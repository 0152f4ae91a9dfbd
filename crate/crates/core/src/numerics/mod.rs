//! Deterministic numeric core: dense matrices, seeded RNG, and the
//! two-layer MLP with manual gradients.
//!
//! Everything here is pure or mutates only its receiver, so values are safe
//! to move between threads.

pub mod matrix;
pub mod mlp;
pub mod rng;

pub use matrix::Matrix;
pub use mlp::{
    bce_loss, mlp_backward, mlp_backward_logit, mlp_backward_logit_into, mlp_forward, mse_loss,
    sgd_step, sigmoid, softplus, ForwardCache, MlpGradients, MlpParams, OutputKind,
};
pub use rng::{stream_seed, Rng};
