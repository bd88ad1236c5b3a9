//! Two-view variational autoencoder whose latent spaces are coupled only
//! through a joint Gaussian prior with a learnable cross-covariance block.

pub mod autodiff;
pub mod checkpoint;
pub mod classifier;
pub mod covparam;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod imputation;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod prior;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
