use nalgebra::{DMatrix, DVector};

use super::RegressionSystem;
use crate::error::{Error, Result};

const GENERIC_TOL: f64 = 1e-12;
const REPEATED_TOL: f64 = 1e-12;

/// Total least squares from the SVD of the augmented matrix `[D c]`.
///
/// With `v` the right singular vector of the smallest singular value,
/// `[D c] v ~ 0` gives `c ~ -D v[..p] / v[p]`; that is the sign convention
/// used here, so a consistent system returns its exact solution.
///
/// The augmented matrix is first reduced by QR; the SVD runs on the small
/// triangular factor, which has the same right singular vectors.
pub fn tls_estimate(sys: &RegressionSystem) -> Result<DVector<f64>> {
    let (n, p) = (sys.rows(), sys.params());
    if n < p + 1 {
        return Err(Error::Dimension(format!(
            "total least squares needs n > p, got n = {n}, p = {p}"
        )));
    }
    let mut aug = DMatrix::zeros(n, p + 1);
    aug.view_mut((0, 0), (n, p)).copy_from(&sys.d);
    aug.set_column(p, &sys.c);
    let r = aug.qr().r();
    let svd = r.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let sv = &svd.singular_values;

    // singular values come back sorted in descending order
    let smallest = sv[p];
    let next = sv[p - 1];
    let scale = sv[0].max(f64::MIN_POSITIVE);
    if (next - smallest) <= REPEATED_TOL * scale {
        return Err(Error::DegenerateSvd(next, smallest));
    }
    let v = v_t.row(p).transpose();
    let vqq = v[p];
    if vqq.abs() <= GENERIC_TOL {
        return Err(Error::NonGenericTls(vqq));
    }
    Ok(DVector::from_fn(p, |j, _| -v[j] / vqq))
}
