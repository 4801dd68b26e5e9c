//! Diffusion probabilistic models: learned reversals of Gaussian and binomial
//! diffusion processes, trained on an analytic lower bound of the log
//! likelihood, with sampling, importance-weighted likelihood estimates and
//! conditioning on a second distribution.

pub mod approximators;
pub mod autodiff;
pub mod cli;
pub mod conditioning;
pub mod datasets;
pub mod inference;
pub mod error;
pub mod kernels;
pub mod objective;

pub use error::{Error, Result};
