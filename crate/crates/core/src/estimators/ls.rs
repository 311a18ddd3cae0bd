use nalgebra::DVector;

use super::{qr_least_squares, RegressionSystem};
use crate::error::Result;

/// Condition-number cap applied to every least-squares solve.
pub const DEFAULT_CONDITION_CAP: f64 = 1e12;

/// Ordinary least squares, `argmin ||c - D x||`.
pub fn ls_estimate(sys: &RegressionSystem) -> Result<DVector<f64>> {
    ls_estimate_with_cap(sys, DEFAULT_CONDITION_CAP)
}

pub fn ls_estimate_with_cap(sys: &RegressionSystem, cap: f64) -> Result<DVector<f64>> {
    qr_least_squares(&sys.d, &sys.c, cap)
}
