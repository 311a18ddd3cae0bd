//! Errors-in-variables estimation with per-component Gaussian noise on both
//! the dependent vector and the design matrix.
//!
//! For component `g` the net row noise `c - D x` has mean
//! `mu_net = mu_c - mu_D * sum(x)` and variance
//! `var_net = var_c + var_D * |x|^2`, and the multiplier is
//! `lambda_g = (c_g - D_g x - mu_net) / var_net`. The stationarity condition is
//! `f(x) = sum_g (D_g - De_g)^T lambda_g = 0`, where `De_g` is the D-noise
//! estimate at the current `x`. Expanded,
//! `f(x) = sum_g D_g^T lambda_g + var_D |lambda_g|^2 x - mu_D sum(lambda_g) 1`,
//! which is the negative gradient of `sum_g |c_g - D_g x - mu_net|^2 / (2 var_net)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ClusteredSystem;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianMode {
    #[default]
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonConfig {
    pub k_max: usize,
    /// Stop once the full Newton step is shorter than this (2-norm).
    pub tol_x: f64,
    pub jacobian_mode: JacobianMode,
    /// Relative central-difference step.
    pub fd_step: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            k_max: 50,
            tol_x: 1e-10,
            jacobian_mode: JacobianMode::Analytic,
            fd_step: 1e-6,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::Config("newton.k_max must be at least 1".into()));
        }
        if !(self.tol_x > 0.0) {
            return Err(Error::Config("newton.tol_x must be positive".into()));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::Config("newton.fd_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EivResidual {
    pub f: DVector<f64>,
    /// One multiplier vector per cluster, in cluster row order.
    pub lambdas: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `|f(x)|_inf` at the returned point.
    pub residual_inf: f64,
}

/// Recovered noise, reassembled in original row order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseEstimates {
    pub c_e: DVector<f64>,
    pub d_e: DMatrix<f64>,
    pub lambdas: Vec<DVector<f64>>,
}

fn net_moments(clustered: &ClusteredSystem, g: usize, x: &DVector<f64>) -> Result<(f64, f64)> {
    let (mu_d, var_d) = clustered.d_noise(g);
    let mu_net = clustered.noise_c.means[g] - mu_d * x.sum();
    let var_net = clustered.noise_c.variances[g] + var_d * x.norm_squared();
    if !(var_net > 0.0) || !var_net.is_finite() {
        return Err(Error::DegenerateVariance {
            component: g,
            value: var_net,
        });
    }
    Ok((mu_net, var_net))
}

fn check_x(clustered: &ClusteredSystem, x: &DVector<f64>) -> Result<()> {
    if x.len() != clustered.params() {
        return Err(Error::Dimension(format!(
            "x has {} entries, system has {} parameters",
            x.len(),
            clustered.params()
        )));
    }
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidSample {
            index,
            value: x[index],
        });
    }
    Ok(())
}

pub fn eiv_residual(x: &DVector<f64>, clustered: &ClusteredSystem) -> Result<EivResidual> {
    check_x(clustered, x)?;
    let p = clustered.params();
    let mut f = DVector::zeros(p);
    let mut lambdas = Vec::with_capacity(clustered.components());
    for (g, cluster) in clustered.clusters.iter().enumerate() {
        if cluster.is_empty() {
            lambdas.push(DVector::zeros(0));
            continue;
        }
        let (mu_net, var_net) = net_moments(clustered, g, x)?;
        let (mu_d, var_d) = clustered.d_noise(g);
        let mut lambda = &cluster.c - &cluster.d * x;
        lambda.apply(|v| *v = (*v - mu_net) / var_net);
        f += cluster.d.tr_mul(&lambda);
        f.axpy(var_d * lambda.norm_squared(), x, 1.0);
        f.add_scalar_mut(-mu_d * lambda.sum());
        lambdas.push(lambda);
    }
    Ok(EivResidual { f, lambdas })
}

/// Analytic Jacobian of [`eiv_residual`]'s `f`.
///
/// With `A = D_g - mu_D 1 1^T` and `L = d lambda / dx = -(A + 2 var_D lambda x^T) / var_net`,
/// the cluster contribution is `A^T L + var_D (2 x lambda^T L + |lambda|^2 I)`.
/// `A^T A` is assembled from the cached `D^T D` and `D^T 1`.
pub fn eiv_jacobian(x: &DVector<f64>, clustered: &ClusteredSystem) -> Result<DMatrix<f64>> {
    check_x(clustered, x)?;
    let p = clustered.params();
    let mut jac = DMatrix::zeros(p, p);
    for (g, cluster) in clustered.clusters.iter().enumerate() {
        if cluster.is_empty() {
            continue;
        }
        let (mu_net, var_net) = net_moments(clustered, g, x)?;
        let (mu_d, var_d) = clustered.d_noise(g);
        let ng = cluster.len() as f64;
        let mut lambda = &cluster.c - &cluster.d * x;
        lambda.apply(|v| *v = (*v - mu_net) / var_net);
        let lam_sq = lambda.norm_squared();

        let s = &cluster.dt1;
        let ones = DVector::from_element(p, 1.0);
        let mut ata = cluster.dtd.clone();
        ata -= mu_d * (s * ones.transpose() + &ones * s.transpose());
        ata.add_scalar_mut(mu_d * mu_d * ng);

        // A^T lambda
        let mut at_lambda = cluster.d.tr_mul(&lambda);
        at_lambda.add_scalar_mut(-mu_d * lambda.sum());

        // A^T L = -(A^T A + 2 var_D (A^T lambda) x^T) / var_net
        let at_l = -(ata + (2.0 * var_d) * &at_lambda * x.transpose()) / var_net;
        // lambda^T L as a column: -(A^T lambda + 2 var_D |lambda|^2 x) / var_net
        let lt_l = -(&at_lambda + (2.0 * var_d * lam_sq) * x) / var_net;

        jac += at_l;
        jac += (2.0 * var_d) * x * lt_l.transpose();
        for j in 0..p {
            jac[(j, j)] += var_d * lam_sq;
        }
    }
    Ok(jac)
}

/// Central-difference Jacobian with step `rel_step * max(|x_j|, 1)`.
pub fn eiv_jacobian_fd(x: &DVector<f64>, clustered: &ClusteredSystem, rel_step: f64) -> Result<DMatrix<f64>> {
    check_x(clustered, x)?;
    let p = clustered.params();
    let mut jac = DMatrix::zeros(p, p);
    for j in 0..p {
        let h = rel_step * x[j].abs().max(1.0);
        let mut plus = x.clone();
        plus[j] += h;
        let mut minus = x.clone();
        minus[j] -= h;
        let fp = eiv_residual(&plus, clustered)?.f;
        let fm = eiv_residual(&minus, clustered)?.f;
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    Ok(jac)
}

const MAX_HALVINGS: usize = 20;

/// Damped Newton iteration on `f(x) = 0`.
///
/// The full step is halved (at most 20 times) until `|f|_2` does not
/// increase. Converged means the full Newton step fell below `tol_x`.
/// Running out of iterations, or a line search that cannot reduce `|f|`,
/// returns the best iterate seen with `converged = false`.
pub fn eiv_newton_solve(
    clustered: &ClusteredSystem,
    x0: &DVector<f64>,
    cfg: &NewtonConfig,
) -> Result<NewtonOutcome> {
    cfg.validate()?;
    let mut x = x0.clone();
    let mut f = eiv_residual(&x, clustered)?.f;
    let mut f_norm = f.norm();
    let mut iterations = 0;
    while iterations < cfg.k_max {
        iterations += 1;
        let jac = match cfg.jacobian_mode {
            JacobianMode::Analytic => eiv_jacobian(&x, clustered)?,
            JacobianMode::FiniteDifference => eiv_jacobian_fd(&x, clustered, cfg.fd_step)?,
        };
        let step = jac
            .lu()
            .solve(&(-&f))
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or(Error::SingularJacobian {
                iteration: iterations,
            })?;
        let full_norm = step.norm();

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial = &x + t * &step;
            if let Ok(r) = eiv_residual(&trial, clustered) {
                let n = r.f.norm();
                if n <= f_norm {
                    accepted = Some((trial, r.f, n));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((xn, fn_, nn)) => {
                x = xn;
                f = fn_;
                f_norm = nn;
            }
            None => {
                return Ok(NewtonOutcome {
                    residual_inf: f.amax(),
                    converged: full_norm < cfg.tol_x,
                    x,
                    iterations,
                });
            }
        }
        if full_norm < cfg.tol_x {
            return Ok(NewtonOutcome {
                residual_inf: f.amax(),
                converged: true,
                x,
                iterations,
            });
        }
    }
    Ok(NewtonOutcome {
        residual_inf: f.amax(),
        converged: false,
        x,
        iterations,
    })
}

/// Noise estimates implied by `x` and its multipliers:
/// `c_e = var_c lambda + mu_c` and `De_ij = -x_j var_D lambda_i + mu_D`.
pub fn recover_noise(
    x: &DVector<f64>,
    lambdas: &[DVector<f64>],
    clustered: &ClusteredSystem,
) -> Result<NoiseEstimates> {
    check_x(clustered, x)?;
    if lambdas.len() != clustered.components() {
        return Err(Error::Dimension(format!(
            "{} multiplier vectors for {} clusters",
            lambdas.len(),
            clustered.components()
        )));
    }
    let (n, p) = (clustered.rows(), clustered.params());
    let mut c_e = DVector::zeros(n);
    let mut d_e = DMatrix::zeros(n, p);
    for (g, (cluster, lambda)) in clustered.clusters.iter().zip(lambdas).enumerate() {
        if lambda.len() != cluster.len() {
            return Err(Error::Dimension(format!(
                "cluster {g} has {} rows but {} multipliers",
                cluster.len(),
                lambda.len()
            )));
        }
        let (mu_c, var_c) = (clustered.noise_c.means[g], clustered.noise_c.variances[g]);
        let (mu_d, var_d) = clustered.d_noise(g);
        for (k, &row) in cluster.rows.iter().enumerate() {
            c_e[row] = var_c * lambda[k] + mu_c;
            for j in 0..p {
                d_e[(row, j)] = -x[j] * var_d * lambda[k] + mu_d;
            }
        }
    }
    Ok(NoiseEstimates {
        c_e,
        d_e,
        lambdas: lambdas.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{gmm_dep_estimate, RegressionSystem};
    use crate::gmm::{ClusterAssignment, GmmSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn toy() -> ClusteredSystem {
        let d = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.5, -1.0, 3.0, 0.25]);
        let c = DVector::from_vec(vec![0.3, -0.7, 1.1]);
        let sys = RegressionSystem::new(d, c).unwrap();
        ClusteredSystem::single(
            &sys,
            GmmSpec::new(vec![1.0], vec![0.01], vec![0.04]).unwrap(),
            Some(GmmSpec::new(vec![1.0], vec![-0.02], vec![0.09]).unwrap()),
        )
        .unwrap()
    }

    /// Two clusters, both noise mixtures non-trivial, ~unit-scale design.
    fn random_instance(seed: u64, n: usize, p: usize) -> (ClusteredSystem, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = DVector::from_fn(p, |_, _| rng.random_range(-1.5..1.5));
        let d = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
        let c = &d * &truth + DVector::from_fn(n, |_, _| rng.random_range(-0.1..0.1));
        let sys = RegressionSystem::new(d, c).unwrap();
        let labels = (0..n).map(|_| rng.random_range(0..2)).collect();
        let cs = ClusteredSystem::new(
            &sys,
            &ClusterAssignment::from_labels(labels, 2),
            GmmSpec::new(vec![0.5, 0.5], vec![0.01, -0.02], vec![0.004, 0.01]).unwrap(),
            Some(GmmSpec::new(vec![0.5, 0.5], vec![0.0, 0.005], vec![0.001, 0.003]).unwrap()),
        )
        .unwrap();
        (cs, truth)
    }

    #[test]
    fn toy_matches_hand_evaluation() {
        let x = DVector::from_vec(vec![0.4, -0.2]);
        let r = eiv_residual(&x, &toy()).unwrap();
        // mu_net = 0.014, var_net = 0.058
        let lam = [4.93103448275862, -19.206896551724135, -1.1034482758620703];
        for (a, b) in r.lambdas[0].iter().zip(lam) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((r.f[0] - 5.909407847800229).abs() < 1e-11);
        assert!((r.f[1] - 21.385640903686085).abs() < 1e-11);
    }

    #[test]
    fn zero_residual_at_truth() {
        let d = DMatrix::from_fn(12, 3, |i, j| ((i * 3 + j) as f64 * 0.7).sin() + 0.1 * j as f64);
        let truth = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let sys = RegressionSystem::new(d.clone(), &d * &truth).unwrap();
        let cs = ClusteredSystem::single(
            &sys,
            GmmSpec::gaussian(0.0, 1e-4).unwrap(),
            Some(GmmSpec::gaussian(0.0, 1e-4).unwrap()),
        )
        .unwrap();
        let r = eiv_residual(&truth, &cs).unwrap();
        assert!(r.lambdas[0].amax() < 1e-10);
        assert!(r.f.amax() < 1e-9);
        let ne = recover_noise(&truth, &r.lambdas, &cs).unwrap();
        assert!(ne.c_e.amax() < 1e-13 && ne.d_e.amax() < 1e-13);
    }

    #[test]
    fn dependent_only_case_reduces_to_gmm_dep() {
        let (mut cs, _) = random_instance(4, 60, 3);
        cs.noise_d = None;
        let x = gmm_dep_estimate(&cs).unwrap();
        let r = eiv_residual(&x, &cs).unwrap();
        assert!(r.f.amax() < 1e-10, "{}", r.f.amax());

        let out = eiv_newton_solve(&cs, &DVector::zeros(3), &NewtonConfig::default()).unwrap();
        assert!(out.converged);
        assert!(out.iterations <= 2, "{}", out.iterations);
        assert!((out.x - x).amax() < 1e-10);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for seed in 0..3 {
            let (cs, truth) = random_instance(seed, 40, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            for _ in 0..10 {
                let x = truth.map(|v| v + rng.random_range(-0.5..0.5));
                let a = eiv_jacobian(&x, &cs).unwrap();
                let fd = eiv_jacobian_fd(&x, &cs, 1e-6).unwrap();
                let rel = (&a - &fd).norm() / a.norm();
                assert!(rel < 1e-5, "relative Frobenius error {rel:e}");
            }
        }
    }

    #[test]
    fn newton_converges_to_root() {
        for seed in 0..5 {
            let (cs, truth) = random_instance(seed, 80, 4);
            let out = eiv_newton_solve(&cs, &truth.map(|v| v * 1.2), &NewtonConfig::default()).unwrap();
            assert!(out.converged, "seed {seed}");
            assert!(out.residual_inf <= 1e-9, "{:e}", out.residual_inf);
            let fd_cfg = NewtonConfig {
                jacobian_mode: JacobianMode::FiniteDifference,
                tol_x: 1e-8,
                ..NewtonConfig::default()
            };
            let fd = eiv_newton_solve(&cs, &truth.map(|v| v * 1.2), &fd_cfg).unwrap();
            assert!((fd.x - &out.x).amax() < 1e-7);
        }
    }

    /// Profiled objective of the normalized-noise problem written row by row.
    fn profile_objective(cs: &ClusteredSystem, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for (g, cl) in cs.clusters.iter().enumerate() {
            let (mu_c, var_c) = (cs.noise_c.means[g], cs.noise_c.variances[g]);
            let spec_d = cs.noise_d.as_ref().unwrap();
            let (mu_d, var_d) = (spec_d.means[g], spec_d.variances[g]);
            let sx: f64 = x.iter().sum();
            let sxx: f64 = x.iter().map(|v| v * v).sum();
            for i in 0..cl.len() {
                let mut r = cl.c[i] - mu_c + mu_d * sx;
                for (j, xj) in x.iter().enumerate() {
                    r -= cl.d[(i, j)] * xj;
                }
                total += 0.5 * r * r / (var_c + var_d * sxx);
            }
        }
        total
    }

    #[test]
    fn two_parameter_toy_matches_grid_search() {
        let (cs, truth) = random_instance(9, 30, 2);
        // coarse grid then shrinking pattern search
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        for a in -100..=100 {
            for b in -100..=100 {
                let x = [truth[0] + a as f64 * 0.01, truth[1] + b as f64 * 0.01];
                let v = profile_objective(&cs, &x);
                if v < best.0 {
                    best = (v, x);
                }
            }
        }
        let mut h = 0.01;
        while h > 1e-10 {
            let mut moved = false;
            for (da, db) in [(h, 0.0), (-h, 0.0), (0.0, h), (0.0, -h)] {
                let x = [best.1[0] + da, best.1[1] + db];
                let v = profile_objective(&cs, &x);
                if v < best.0 {
                    best = (v, x);
                    moved = true;
                }
            }
            if !moved {
                h *= 0.5;
            }
        }
        let out = eiv_newton_solve(&cs, &truth, &NewtonConfig::default()).unwrap();
        assert!(out.converged);
        assert!((out.x[0] - best.1[0]).abs() < 1e-5);
        assert!((out.x[1] - best.1[1]).abs() < 1e-5);
    }

    #[test]
    fn recovered_noise_mean_matches_generator() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 4000;
        let p = 3;
        let truth = DVector::from_vec(vec![0.8, -0.5, 1.2]);
        let (mu_c, sd_c, mu_d, sd_d) = (0.03, 0.02, 0.01, 0.01);
        let d_true = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
        let nc = Normal::new(mu_c, sd_c).unwrap();
        let nd = Normal::new(mu_d, sd_d).unwrap();
        let c = &d_true * &truth + DVector::from_fn(n, |_, _| nc.sample(&mut rng));
        let d = d_true.map(|v| v + nd.sample(&mut rng));
        let sys = RegressionSystem::new(d, c).unwrap();
        let cs = ClusteredSystem::single(
            &sys,
            GmmSpec::gaussian(mu_c, sd_c * sd_c).unwrap(),
            Some(GmmSpec::gaussian(mu_d, sd_d * sd_d).unwrap()),
        )
        .unwrap();
        let out = eiv_newton_solve(&cs, &truth, &NewtonConfig::default()).unwrap();
        let r = eiv_residual(&out.x, &cs).unwrap();
        let ne = recover_noise(&out.x, &r.lambdas, &cs).unwrap();
        let mean = ne.c_e.mean();
        let sd = (ne.c_e.map(|v| (v - mean) * (v - mean)).sum() / (n - 1) as f64).sqrt();
        assert!((mean - mu_c).abs() < 3.0 * sd / (n as f64).sqrt());
    }

    proptest! {
        #[test]
        fn reconstruction_identity(seed in 0u64..1000, scale in 0.2f64..3.0) {
            let (cs, truth) = random_instance(seed, 24, 3);
            let x = truth.map(|v| v * scale);
            let r = eiv_residual(&x, &cs).unwrap();
            let ne = recover_noise(&x, &r.lambdas, &cs).unwrap();
            for cl in &cs.clusters {
                for (k, &row) in cl.rows.iter().enumerate() {
                    let mut v = cl.c[k] - ne.c_e[row];
                    for j in 0..3 {
                        v -= (cl.d[(k, j)] - ne.d_e[(row, j)]) * x[j];
                    }
                    prop_assert!(v.abs() <= 1e-9);
                }
            }
        }
    }
}
