use nalgebra::{DMatrix, DVector};

use super::{ls::DEFAULT_CONDITION_CAP, qr_least_squares, ClusteredSystem};
use crate::error::{Error, Result};

/// Closed-form estimate when only the dependent variables carry mixture noise.
///
/// Minimizes the sum of squared standardized errors
/// `sum_g ||c_g - D_g x - mu_g||^2 / var_g`, whose normal equations are
/// `(sum_g D_g^T D_g / var_g) x = sum_g D_g^T (c_g - mu_g) / var_g`. The
/// solve runs through QR on the row-scaled stacked system instead of forming
/// those normal equations.
pub fn gmm_dep_estimate(clustered: &ClusteredSystem) -> Result<DVector<f64>> {
    let n = clustered.rows();
    let p = clustered.params();
    let mut a = DMatrix::zeros(n, p);
    let mut b = DVector::zeros(n);
    let mut row = 0;
    for (g, cluster) in clustered.clusters.iter().enumerate() {
        if cluster.is_empty() {
            continue;
        }
        let var = clustered.noise_c.variances[g];
        if !(var > 0.0) {
            return Err(Error::DegenerateVariance {
                component: g,
                value: var,
            });
        }
        let scale = 1.0 / var.sqrt();
        let mu = clustered.noise_c.means[g];
        for i in 0..cluster.len() {
            for j in 0..p {
                a[(row, j)] = cluster.d[(i, j)] * scale;
            }
            b[row] = (cluster.c[i] - mu) * scale;
            row += 1;
        }
    }
    qr_least_squares(&a, &b, DEFAULT_CONDITION_CAP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{ls_estimate, RegressionSystem};
    use crate::gmm::{ClusterAssignment, GmmSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_system(seed: u64, n: usize) -> RegressionSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let c = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        RegressionSystem::new(d, c).unwrap()
    }

    #[test]
    fn single_zero_mean_component_is_ls() {
        let sys = random_system(1, 30);
        for var in [1e-6, 1.0, 250.0] {
            let cs = ClusteredSystem::single(&sys, GmmSpec::gaussian(0.0, var).unwrap(), None).unwrap();
            let x = gmm_dep_estimate(&cs).unwrap();
            assert!((x - ls_estimate(&sys).unwrap()).amax() < 1e-12);
        }
    }

    #[test]
    fn per_cluster_bias_cancels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = DVector::from_vec(vec![0.7, -2.0, 1.5]);
        let d = DMatrix::from_fn(24, 3, |_, _| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..24).map(|i| i % 3).collect();
        let means = [0.0, 0.005, -0.3];
        let c = DVector::from_fn(24, |i, _| (d.row(i) * &truth)[0] + means[labels[i]]);
        let sys = RegressionSystem::new(d, c).unwrap();
        let spec = GmmSpec::new(vec![1.0 / 3.0; 3], means.to_vec(), vec![1e-4, 4e-4, 1.0]).unwrap();
        let cs = ClusteredSystem::new(&sys, &ClusterAssignment::from_labels(labels, 3), spec, None).unwrap();
        let x = gmm_dep_estimate(&cs).unwrap();
        assert!((x - truth).amax() < 1e-10);
    }

    /// Coordinate-free minimizer oracle: Nelder-Mead on the standardized
    /// error objective, no linear algebra shared with the estimator.
    fn nelder_mead(f: impl Fn(&[f64]) -> f64, x0: &[f64], iters: usize) -> Vec<f64> {
        let p = x0.len();
        let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
        for j in 0..p {
            let mut v = x0.to_vec();
            v[j] += 0.5;
            simplex.push(v);
        }
        let mut vals: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
        for _ in 0..iters {
            let mut idx: Vec<usize> = (0..=p).collect();
            idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
            simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
            vals = idx.iter().map(|&i| vals[i]).collect();
            let centroid: Vec<f64> = (0..p)
                .map(|j| simplex[..p].iter().map(|v| v[j]).sum::<f64>() / p as f64)
                .collect();
            let at = |t: f64| -> Vec<f64> {
                (0..p).map(|j| centroid[j] + t * (simplex[p][j] - centroid[j])).collect()
            };
            let xr = at(-1.0);
            let fr = f(&xr);
            if fr < vals[0] {
                let xe = at(-2.0);
                let fe = f(&xe);
                if fe < fr {
                    simplex[p] = xe;
                    vals[p] = fe;
                } else {
                    simplex[p] = xr;
                    vals[p] = fr;
                }
            } else if fr < vals[p - 1] {
                simplex[p] = xr;
                vals[p] = fr;
            } else {
                let xc = at(0.5);
                let fc = f(&xc);
                if fc < vals[p] {
                    simplex[p] = xc;
                    vals[p] = fc;
                } else {
                    for k in 1..=p {
                        simplex[k] = (0..p)
                            .map(|j| simplex[0][j] + 0.5 * (simplex[k][j] - simplex[0][j]))
                            .collect();
                        vals[k] = f(&simplex[k]);
                    }
                }
            }
        }
        let best = (0..=p).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
        simplex[best].clone()
    }

    #[test]
    fn matches_numeric_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40;
        let d = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let c = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let means = [0.1, -0.4];
        let vars = [0.5, 2.0];
        let sys = RegressionSystem::new(d.clone(), c.clone()).unwrap();
        let spec = GmmSpec::new(vec![0.5, 0.5], means.to_vec(), vars.to_vec()).unwrap();
        let cs = ClusteredSystem::new(&sys, &ClusterAssignment::from_labels(labels.clone(), 2), spec, None)
            .unwrap();
        let x = gmm_dep_estimate(&cs).unwrap();

        let objective = |v: &[f64]| -> f64 {
            (0..n)
                .map(|i| {
                    let g = labels[i];
                    let r = c[i] - (0..3).map(|j| d[(i, j)] * v[j]).sum::<f64>() - means[g];
                    0.5 * r * r / vars[g]
                })
                .sum()
        };
        let oracle = nelder_mead(objective, &[0.0, 0.0, 0.0], 4000);
        for j in 0..3 {
            assert!((x[j] - oracle[j]).abs() < 1e-6, "{j}: {} vs {}", x[j], oracle[j]);
        }
    }
}
