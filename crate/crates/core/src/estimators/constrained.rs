//! Least squares and total least squares under `x[keep] + x[negated] = 0`
//! plus an a-posteriori box check.
//!
//! The equality is enforced exactly by eliminating `x[negated] = -x[keep]`:
//! the reduced design replaces column `keep` by `D[keep] - D[negated]` and
//! drops column `negated`. For TLS the eliminated problem is solved with
//! ordinary TLS on the reduced augmented matrix, which is an approximation of
//! a fully constrained TLS objective.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ls::DEFAULT_CONDITION_CAP, qr_least_squares, tls_estimate, RegressionSystem};
use crate::error::{Error, Result};

/// Equality `x[keep] + x[negated] = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegatedPair {
    pub keep: usize,
    pub negated: usize,
}

impl NegatedPair {
    /// `Y1 + Y3 = 0` of the line admittance vector.
    pub const LINE_ADMITTANCE: NegatedPair = NegatedPair { keep: 0, negated: 2 };
}

impl Default for NegatedPair {
    fn default() -> Self {
        Self::LINE_ADMITTANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxBounds {
    /// `x0 +/- fraction * |x0|` per entry.
    pub fn around(x0: &DVector<f64>, fraction: f64) -> Self {
        BoxBounds {
            lower: x0.map(|v| v - fraction * v.abs()),
            upper: x0.map(|v| v + fraction * v.abs()),
        }
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedEstimate {
    pub x: DVector<f64>,
    /// The unconstrained-by-box solution fell outside the box and was projected.
    pub box_active: bool,
}

fn reduce(sys: &RegressionSystem, pair: NegatedPair) -> Result<(RegressionSystem, Vec<usize>)> {
    let p = sys.params();
    if pair.keep == pair.negated || pair.keep >= p || pair.negated >= p {
        return Err(Error::Config(format!("invalid constraint pair {pair:?} for p = {p}")));
    }
    let kept: Vec<usize> = (0..p).filter(|&j| j != pair.negated).collect();
    let d = DMatrix::from_fn(sys.rows(), p - 1, |i, k| {
        let j = kept[k];
        if j == pair.keep {
            sys.d[(i, pair.keep)] - sys.d[(i, pair.negated)]
        } else {
            sys.d[(i, j)]
        }
    });
    let reduced = RegressionSystem::with_instants(d, sys.c.clone(), sys.rows_per_instant())?;
    Ok((reduced, kept))
}

fn expand(z: &DVector<f64>, kept: &[usize], pair: NegatedPair, p: usize) -> DVector<f64> {
    let mut x = DVector::zeros(p);
    for (k, &j) in kept.iter().enumerate() {
        x[j] = z[k];
    }
    x[pair.negated] = -x[pair.keep];
    x
}

/// Clamp into the box while keeping the equality: the shared variable is
/// clamped to the intersection of its own interval and the mirrored interval
/// of its negated partner.
fn project(
    mut x: DVector<f64>,
    bounds: &BoxBounds,
    pair: NegatedPair,
) -> Result<ConstrainedEstimate> {
    if bounds.lower.len() != x.len() || bounds.upper.len() != x.len() {
        return Err(Error::Dimension("box bounds do not match parameter count".into()));
    }
    if bounds.contains(&x) {
        return Ok(ConstrainedEstimate { x, box_active: false });
    }
    let (k, q) = (pair.keep, pair.negated);
    let lo = bounds.lower[k].max(-bounds.upper[q]);
    let hi = bounds.upper[k].min(-bounds.lower[q]);
    if lo > hi {
        return Err(Error::Infeasible(
            "box does not intersect the equality constraint".into(),
        ));
    }
    for j in 0..x.len() {
        if j == k {
            x[j] = x[j].clamp(lo, hi);
        } else if j != q {
            x[j] = x[j].clamp(bounds.lower[j], bounds.upper[j]);
        }
    }
    x[q] = -x[k];
    Ok(ConstrainedEstimate { x, box_active: true })
}

fn infeasible(e: Error) -> Error {
    match e {
        Error::IllConditioned { condition, .. } => {
            Error::Infeasible(format!("eliminated system has condition number {condition:e}"))
        }
        other => other,
    }
}

pub fn constrained_ls(
    sys: &RegressionSystem,
    pair: NegatedPair,
    bounds: Option<&BoxBounds>,
) -> Result<ConstrainedEstimate> {
    let (reduced, kept) = reduce(sys, pair)?;
    let z = qr_least_squares(&reduced.d, &reduced.c, DEFAULT_CONDITION_CAP).map_err(infeasible)?;
    let x = expand(&z, &kept, pair, sys.params());
    match bounds {
        Some(b) => project(x, b, pair),
        None => Ok(ConstrainedEstimate { x, box_active: false }),
    }
}

pub fn constrained_tls(
    sys: &RegressionSystem,
    pair: NegatedPair,
    bounds: Option<&BoxBounds>,
) -> Result<ConstrainedEstimate> {
    let (reduced, kept) = reduce(sys, pair)?;
    let z = tls_estimate(&reduced).map_err(infeasible)?;
    let x = expand(&z, &kept, pair, sys.params());
    match bounds {
        Some(b) => project(x, b, pair),
        None => Ok(ConstrainedEstimate { x, box_active: false }),
    }
}
