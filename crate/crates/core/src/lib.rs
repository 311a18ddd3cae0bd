//! Joint estimation of Gaussian-mixture measurement noise and model parameters
//! for linear regression, with errors in both the dependent and independent
//! variables, applied to transmission line parameter estimation.

pub mod baselines;
pub mod egle;
pub mod error;
pub mod estimators;
pub mod gmm;
pub mod harness;
pub mod par;
pub mod tlpe;

pub use error::{Error, Result};
