//! Dense linear algebra, stable reductions and seeded initialisation.

mod init;
mod matrix;
mod ops;

pub use init::{init_matrix, InitScheme, RngState};
pub use matrix::{Matrix, Real};
pub use ops::{
    gaussian_nll, layer_norm, logsumexp, matmul, matmul_nt, relu, softmax_rows, softplus,
    LAYER_NORM_EPS,
};
