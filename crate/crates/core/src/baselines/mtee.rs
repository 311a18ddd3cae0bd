//! Minimum total error entropy by steepest descent on the Parzen estimate of
//! the quadratic Renyi entropy.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::RegressionSystem;
use crate::par::{self, Execution};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MteeConfig {
    /// Parzen kernel size; Silverman's rule on the starting total errors when absent.
    pub kernel_sigma: Option<f64>,
    pub step_size: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Use the first `parzen_n` rows for the entropy; all rows when absent.
    pub parzen_n: Option<usize>,
    /// Halve rejected steps and grow accepted ones. Off gives plain fixed-step descent.
    pub backtracking: bool,
    pub execution: Execution,
}

impl Default for MteeConfig {
    fn default() -> Self {
        MteeConfig {
            kernel_sigma: None,
            step_size: 1e-3,
            max_iter: 200,
            tol: 1e-10,
            parzen_n: None,
            backtracking: true,
            execution: Execution::default(),
        }
    }
}

impl MteeConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.kernel_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config("mtee.kernel_sigma must be positive".into()));
            }
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("mtee.step_size must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("mtee.max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("mtee.tol must be positive".into()));
        }
        if self.parzen_n == Some(0) {
            return Err(Error::Config("mtee.parzen_n must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MteeOutcome {
    pub x: Vec<f64>,
    /// Entropy at the start and after every iteration.
    pub entropy_trace: Vec<f64>,
    pub kernel_sigma: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `(c - D x) / sqrt(x^T x + 1)`.
pub fn total_error(sys: &RegressionSystem, x: &DVector<f64>) -> DVector<f64> {
    sys.residual(x) / (x.norm_squared() + 1.0).sqrt()
}

/// Unnormalized kernel values `exp(-(e_k - e_j)^2 / (2 s^2))` for `j > k`,
/// one row per `k`.
fn upper_kernel(e: &[f64], inv_2s2: f64, exec: Execution) -> Vec<Vec<f64>> {
    par::map_indexed(exec, e.len(), |k| {
        e[k + 1..].iter().map(|&ej| (-(e[k] - ej) * (e[k] - ej) * inv_2s2).exp()).collect()
    })
}

/// Quadratic Renyi entropy of `e` with a Gaussian Parzen window of size `sigma`:
/// `-ln( N^-2 sum_i sum_j G_{sigma sqrt 2}(e_j - e_i) )`.
pub fn renyi_entropy(e: &[f64], sigma: f64, exec: Execution) -> f64 {
    let n = e.len();
    let s = sigma * std::f64::consts::SQRT_2;
    let upper = upper_kernel(e, 1.0 / (2.0 * s * s), exec);
    let off: f64 = upper.iter().map(|row| row.iter().sum::<f64>()).sum();
    let total = (n as f64 + 2.0 * off) * INV_SQRT_2PI / s;
    -(total / (n * n) as f64).ln()
}

/// `1.06 * std * n^(-1/5)`.
pub fn silverman_bandwidth(e: &[f64]) -> f64 {
    let n = e.len() as f64;
    let mean = e.iter().sum::<f64>() / n;
    let sd = (e.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    1.06 * sd * n.powf(-0.2)
}

fn window(sys: &RegressionSystem, cfg: &MteeConfig) -> usize {
    cfg.parzen_n.map_or(sys.rows(), |k| k.min(sys.rows()))
}

fn errors(sys: &RegressionSystem, x: &DVector<f64>, n: usize) -> Vec<f64> {
    total_error(sys, x).as_slice()[..n].to_vec()
}

/// Entropy of the total errors at `x`.
pub fn mtee_entropy(sys: &RegressionSystem, x: &DVector<f64>, sigma: f64, cfg: &MteeConfig) -> f64 {
    renyi_entropy(&errors(sys, x, window(sys, cfg)), sigma, cfg.execution)
}

/// Analytic gradient of [`mtee_entropy`] with respect to `x`.
///
/// With `V = N^-2 sum_ij G(e_j - e_i)`, `H = -ln V` and the kernel derivative
/// odd, `grad V = 2 N^-2 sum_k w_k grad e_k` where
/// `w_k = sum_i G'(e_k - e_i)`, and `grad e_k = -d_k / rho - e_k x / rho^2`
/// with `rho = sqrt(x^T x + 1)`.
pub fn entropy_gradient(sys: &RegressionSystem, x: &DVector<f64>, sigma: f64, cfg: &MteeConfig) -> DVector<f64> {
    entropy_with_gradient(sys, x, sigma, cfg).1
}

/// Entropy and its gradient from one pass over the pairs.
fn entropy_with_gradient(sys: &RegressionSystem, x: &DVector<f64>, sigma: f64, cfg: &MteeConfig) -> (f64, DVector<f64>) {
    let n = window(sys, cfg);
    let e = errors(sys, x, n);
    let s = sigma * std::f64::consts::SQRT_2;
    let inv_2s2 = 1.0 / (2.0 * s * s);
    let upper = upper_kernel(&e, inv_2s2, cfg.execution);
    let mut off = 0.0;
    let mut w = vec![0.0; n];
    for (k, row) in upper.iter().enumerate() {
        for (idx, &g) in row.iter().enumerate() {
            let j = k + 1 + idx;
            let ug = (e[k] - e[j]) * g;
            off += g;
            w[k] -= ug;
            w[j] += ug;
        }
    }
    let norm = INV_SQRT_2PI / s;
    let total = (n as f64 + 2.0 * off) * norm;
    let wscale = norm * 2.0 * inv_2s2;
    let rho2 = x.norm_squared() + 1.0;
    let rho = rho2.sqrt();
    let p = sys.params();
    let mut grad_v: DVector<f64> = DVector::zeros(p);
    for (k, &wk) in w.iter().enumerate() {
        for j in 0..p {
            grad_v[j] += wk * wscale * (-sys.d[(k, j)] / rho - e[k] * x[j] / rho2);
        }
    }
    let h = -(total / (n * n) as f64).ln();
    // grad H = -grad V / V; the N^-2 factors cancel
    (h, -(2.0 * grad_v) / total)
}

/// Central differences of [`mtee_entropy`], step `rel_step * max(|x_j|, 1)`.
pub fn entropy_gradient_fd(
    sys: &RegressionSystem,
    x: &DVector<f64>,
    sigma: f64,
    cfg: &MteeConfig,
    rel_step: f64,
) -> DVector<f64> {
    DVector::from_fn(x.len(), |j, _| {
        let h = rel_step * x[j].abs().max(1.0);
        let mut plus = x.clone();
        plus[j] += h;
        let mut minus = x.clone();
        minus[j] -= h;
        (mtee_entropy(sys, &plus, sigma, cfg) - mtee_entropy(sys, &minus, sigma, cfg)) / (2.0 * h)
    })
}

const MAX_HALVINGS: usize = 30;
const GROWTH: f64 = 1.5;

/// Steepest descent on the total error entropy from `x0`.
///
/// With backtracking a step that raises the entropy is halved until it does
/// not, and the step size grows after each accepted step; without it every
/// step uses `step_size` unchanged.
pub fn mtee_estimate(sys: &RegressionSystem, x0: &DVector<f64>, cfg: &MteeConfig) -> Result<MteeOutcome> {
    cfg.validate()?;
    if x0.len() != sys.params() {
        return Err(Error::Dimension(format!(
            "x0 has {} entries, system has {} parameters",
            x0.len(),
            sys.params()
        )));
    }
    let sigma = match cfg.kernel_sigma {
        Some(s) => s,
        None => silverman_bandwidth(&errors(sys, x0, window(sys, cfg))),
    };
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Infeasible(format!("kernel size {sigma:e} from Silverman's rule")));
    }
    let mut x = x0.clone();
    let (mut h, mut g) = entropy_with_gradient(sys, &x, sigma, cfg);
    let mut trace = vec![h];
    let mut eta = cfg.step_size;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let mut step = -eta * &g;
        let mut trial = &x + &step;
        let (mut h_trial, mut g_trial) = entropy_with_gradient(sys, &trial, sigma, cfg);
        if cfg.backtracking {
            let mut halvings = 0;
            while !(h_trial <= h) && halvings < MAX_HALVINGS {
                eta *= 0.5;
                step = -eta * &g;
                trial = &x + &step;
                (h_trial, g_trial) = entropy_with_gradient(sys, &trial, sigma, cfg);
                halvings += 1;
            }
            if !(h_trial <= h) {
                converged = step.norm() < cfg.tol;
                break;
            }
            eta *= GROWTH;
        }
        x = trial;
        h = h_trial;
        g = g_trial;
        trace.push(h);
        if step.norm() < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(MteeOutcome {
        x: x.as_slice().to_vec(),
        entropy_trace: trace,
        kernel_sigma: sigma,
        iterations,
        converged,
    })
}
