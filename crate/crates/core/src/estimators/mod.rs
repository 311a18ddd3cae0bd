//! Estimators for the linear model `c = D x`.

mod constrained;
mod eiv;
mod gmm_dep;
mod ls;
mod tls;

pub use constrained::{constrained_ls, constrained_tls, BoxBounds, ConstrainedEstimate, NegatedPair};
pub use eiv::{
    eiv_jacobian, eiv_jacobian_fd, eiv_newton_solve, eiv_residual, recover_noise, EivResidual,
    JacobianMode, NewtonConfig, NewtonOutcome, NoiseEstimates,
};
pub use gmm_dep::gmm_dep_estimate;
pub use ls::{ls_estimate, ls_estimate_with_cap, DEFAULT_CONDITION_CAP};
pub use tls::tls_estimate;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gmm::{ClusterAssignment, GmmSpec};

/// Dependent vector `c` and design matrix `D`.
///
/// Rows come in blocks of `rows_per_instant` consecutive rows per time
/// instant (4 for systems built from phasor records, 1 otherwise).
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSystem {
    pub d: DMatrix<f64>,
    pub c: DVector<f64>,
    rows_per_instant: usize,
}

impl RegressionSystem {
    pub fn new(d: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        Self::with_instants(d, c, 1)
    }

    pub fn with_instants(d: DMatrix<f64>, c: DVector<f64>, rows_per_instant: usize) -> Result<Self> {
        if d.nrows() != c.len() {
            return Err(Error::Dimension(format!(
                "D has {} rows but c has {} entries",
                d.nrows(),
                c.len()
            )));
        }
        if d.ncols() == 0 || d.nrows() < d.ncols() {
            return Err(Error::Dimension(format!(
                "need n >= p >= 1, got n = {}, p = {}",
                d.nrows(),
                d.ncols()
            )));
        }
        if rows_per_instant == 0 || d.nrows() % rows_per_instant != 0 {
            return Err(Error::Dimension(format!(
                "{} rows do not split into blocks of {rows_per_instant}",
                d.nrows()
            )));
        }
        if let Some(index) = c.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidSample {
                index,
                value: c[index],
            });
        }
        if let Some(index) = d.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidSample {
                index,
                value: d[index],
            });
        }
        Ok(RegressionSystem {
            d,
            c,
            rows_per_instant,
        })
    }

    pub fn rows(&self) -> usize {
        self.d.nrows()
    }

    pub fn params(&self) -> usize {
        self.d.ncols()
    }

    pub fn rows_per_instant(&self) -> usize {
        self.rows_per_instant
    }

    pub fn instant_of_row(&self, row: usize) -> usize {
        row / self.rows_per_instant
    }

    /// `c - D x`.
    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c - &self.d * x
    }
}

/// Rows of one mixture component, with precomputed Gram terms.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub rows: Vec<usize>,
    pub d: DMatrix<f64>,
    pub c: DVector<f64>,
    /// `D_g^T D_g`
    pub(crate) dtd: DMatrix<f64>,
    /// `D_g^T 1`
    pub(crate) dt1: DVector<f64>,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// A regression system split by component membership, together with the
/// mixture describing the dependent-variable noise and, for the
/// errors-in-variables case, the independent-variable noise.
///
/// Cluster `g` is paired with component `g` of both mixtures.
#[derive(Debug, Clone)]
pub struct ClusteredSystem {
    pub clusters: Vec<Cluster>,
    pub noise_c: GmmSpec,
    pub noise_d: Option<GmmSpec>,
    n: usize,
    p: usize,
}

impl ClusteredSystem {
    pub fn new(
        sys: &RegressionSystem,
        assignment: &ClusterAssignment,
        noise_c: GmmSpec,
        noise_d: Option<GmmSpec>,
    ) -> Result<Self> {
        let m = assignment.components();
        if assignment.labels.len() != sys.rows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} rows",
                assignment.labels.len(),
                sys.rows()
            )));
        }
        noise_c.validate()?;
        if noise_c.components() != m {
            return Err(Error::Dimension(format!(
                "dependent-noise mixture has {} components, assignment has {m}",
                noise_c.components()
            )));
        }
        if let Some(spec) = &noise_d {
            spec.validate()?;
            if spec.components() != m {
                return Err(Error::Dimension(format!(
                    "independent-noise mixture has {} components, assignment has {m}",
                    spec.components()
                )));
            }
        }
        let p = sys.params();
        let clusters = assignment
            .index_sets
            .iter()
            .map(|rows| {
                let d = DMatrix::from_fn(rows.len(), p, |i, j| sys.d[(rows[i], j)]);
                let c = DVector::from_fn(rows.len(), |i, _| sys.c[rows[i]]);
                let dtd = d.transpose() * &d;
                let dt1 = DVector::from_fn(p, |j, _| d.column(j).sum());
                Cluster {
                    rows: rows.clone(),
                    d,
                    c,
                    dtd,
                    dt1,
                }
            })
            .collect();
        Ok(ClusteredSystem {
            clusters,
            noise_c,
            noise_d,
            n: sys.rows(),
            p,
        })
    }

    /// Whole system as a single cluster.
    pub fn single(sys: &RegressionSystem, noise_c: GmmSpec, noise_d: Option<GmmSpec>) -> Result<Self> {
        Self::new(sys, &ClusterAssignment::single(sys.rows()), noise_c, noise_d)
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn params(&self) -> usize {
        self.p
    }

    pub fn components(&self) -> usize {
        self.clusters.len()
    }

    /// `(mu_D, var_D)` of component `g`, zero when D is treated as exact.
    pub(crate) fn d_noise(&self, g: usize) -> (f64, f64) {
        self.noise_d
            .as_ref()
            .map_or((0.0, 0.0), |s| (s.means[g], s.variances[g]))
    }
}

/// Least-squares solve through QR with a condition-number guard.
pub(crate) fn qr_least_squares(a: &DMatrix<f64>, b: &DVector<f64>, cap: f64) -> Result<DVector<f64>> {
    let p = a.ncols();
    let qr = a.clone().qr();
    let r = qr.r();
    let r_sq = r.rows(0, p).into_owned();
    let cond = condition_number(&r_sq);
    if !(cond <= cap) {
        return Err(Error::IllConditioned { condition: cond, cap });
    }
    let mut qtb = b.clone();
    qr.q_tr_mul(&mut qtb);
    let rhs = qtb.rows(0, p).into_owned();
    r_sq.solve_upper_triangular(&rhs)
        .ok_or(Error::IllConditioned {
            condition: f64::INFINITY,
            cap,
        })
}

/// 2-norm condition number of a small square matrix.
pub(crate) fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn system_validation() {
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(RegressionSystem::new(d.clone(), DVector::from_vec(vec![1.0])).is_err());
        assert!(RegressionSystem::new(d.clone(), DVector::from_vec(vec![1.0, f64::NAN])).is_err());
        assert!(RegressionSystem::with_instants(d.clone(), DVector::from_vec(vec![1.0, 2.0]), 4).is_err());
        let wide = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert!(RegressionSystem::new(wide, DVector::from_vec(vec![1.0])).is_err());
        let sys = RegressionSystem::new(d, DVector::from_vec(vec![1.0, 2.0])).unwrap();
        assert_eq!(sys.instant_of_row(1), 1);
    }

    #[test]
    fn clustered_rows_partition() {
        let d = DMatrix::from_fn(6, 2, |i, j| (i * 2 + j) as f64);
        let c = DVector::from_fn(6, |i, _| i as f64);
        let sys = RegressionSystem::new(d, c).unwrap();
        let a = ClusterAssignment::from_labels(vec![1, 0, 1, 1, 0, 0], 2);
        let spec = GmmSpec::new(vec![0.5, 0.5], vec![0.0, 1.0], vec![1.0, 2.0]).unwrap();
        let cs = ClusteredSystem::new(&sys, &a, spec, None).unwrap();
        assert_eq!(cs.clusters[0].rows, vec![1, 4, 5]);
        assert_eq!(cs.clusters[1].c.as_slice(), &[0.0, 2.0, 3.0]);
        assert_eq!(cs.clusters[1].d[(1, 1)], 5.0);
        assert_eq!(cs.clusters.iter().map(Cluster::len).sum::<usize>(), 6);
    }
}
