//! Comparison methods: minimum total error entropy and a
//! filter-then-least-squares pipeline.

mod mad;
mod mtee;

pub use mad::{denoise_then_ls, mad_denoise, MadConfig, MadOutcome, Replacement};
pub use mtee::{
    entropy_gradient, entropy_gradient_fd, mtee_entropy, mtee_estimate, renyi_entropy, silverman_bandwidth,
    total_error, MteeConfig, MteeOutcome,
};
