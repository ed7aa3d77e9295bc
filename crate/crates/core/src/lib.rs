//! Exact and sparse-spectrum Gaussian-process regression, with the tools to
//! check how closely a random cosine approximation tracks the exact model.

pub mod bounds;
pub mod clustergen;
pub mod embed;
pub mod error;
pub mod gp;
pub mod harness;
pub mod kernel;
pub mod numerics;
pub mod optim;
pub mod rng;
pub mod ssgp;

pub use error::{Error, Result};
pub use gp::{gp_nll, gp_predict, gp_train, ExactGp, GpPosterior, TrainConfig, TrainTrace};
pub use kernel::{
    cosine_kernel, feature_matrix, feature_vector, gram, sample_spectral, se_kernel, FeatureMap,
    HyperParams, SpectralDraw, SpectralKind,
};
pub use numerics::{cholesky_solve, fd_gradient, sym_eigen, EigenDecomposition, SymMatrix};
