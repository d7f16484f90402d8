//! Dense arrays, the seeded random stream, initializers and activations.

mod activation;
mod init;
mod matrix;
mod rng;

pub use activation::{
    gelu, gelu_prime, normal_cdf, normal_pdf, sigmoid, sigmoid_prime, softplus, Activation,
};
pub use init::{init_embedding_qr, init_hippo_diag, init_normal, init_uniform};
pub use matrix::{dot, Matrix, ParamTensor};
pub use rng::RngState;
