//! AdaFisher: adaptive optimization preconditioned by a diagonal
//! block-Kronecker approximation of the Fisher information, plus the
//! reference oracles, baselines and curvature diagnostics used to check it.

pub mod data;
pub mod diagnostics;
pub mod distributed;
pub mod error;
pub mod fisher;
pub mod kfactor;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
