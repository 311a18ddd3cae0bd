//! Joint noise and parameter estimation.
//!
//! [`egle_dependent`] covers noise in `c` only: alternate an EM fit of the
//! residuals with the clustered closed-form estimator. [`egle_full`] covers
//! noise in both `c` and `D`: recover both noise vectors from the current
//! multipliers, refit both mixtures by EM, then re-solve the stationarity
//! equations by Newton. Both sweep the component count and keep the order
//! with the lowest BIC.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    eiv_newton_solve, eiv_residual, gmm_dep_estimate, ls_estimate, recover_noise, ClusteredSystem, NewtonConfig,
    NoiseEstimates, RegressionSystem,
};
use crate::gmm::{self, cluster_assign, em_fit, em_fit_from, EmConfig, EmFit, GmmSpec};
use crate::par::{self, Execution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EgleConfig {
    pub m_max: usize,
    pub i_max: usize,
    /// Accepted for completeness; not used by either loop.
    pub eps0: f64,
    /// Outer tolerance on `|x^(i+1) - x^(i)|_2`.
    pub eps1: f64,
    pub newton: NewtonConfig,
    pub em: EmConfig,
    /// Starting parameters; the LS estimate when absent.
    pub x0: Option<Vec<f64>>,
    /// Re-start EM from the previous pass's mixture instead of re-initializing.
    pub warm_start: bool,
    /// How the independent m values of the sweep are scheduled.
    pub execution: Execution,
    /// Add the conditional variance of each recovered noise entry to the
    /// refitted mixture variances. Off runs EM on the point estimates alone.
    pub posterior_variance: bool,
}

impl Default for EgleConfig {
    fn default() -> Self {
        EgleConfig {
            m_max: 10,
            i_max: 50,
            eps0: 1e-6,
            eps1: 1e-9,
            newton: NewtonConfig::default(),
            em: EmConfig::default(),
            x0: None,
            warm_start: true,
            execution: Execution::default(),
            posterior_variance: false,
        }
    }
}

impl EgleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_max == 0 {
            return Err(Error::Config("egle.m_max must be at least 1".into()));
        }
        if self.i_max == 0 {
            return Err(Error::Config("egle.i_max must be at least 1".into()));
        }
        if !(self.eps1 > 0.0) {
            return Err(Error::Config("egle.eps1 must be positive".into()));
        }
        if let Some(x0) = &self.x0 {
            if x0.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("egle.x0 must be finite".into()));
            }
        }
        self.newton.validate()?;
        self.em.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EgleVariant {
    Dependent,
    Full,
}

/// Outcome of the inner loops for one component count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentRun {
    pub m: usize,
    /// `+inf` when the run failed.
    pub bic: f64,
    pub x: Option<Vec<f64>>,
    pub loglik_c: Option<f64>,
    pub loglik_d: Option<f64>,
    pub noise_c: Option<GmmSpec>,
    pub noise_d: Option<GmmSpec>,
    pub outer_iterations: usize,
    pub converged: bool,
    /// Every inner Newton solve reported convergence (always true for the dependent loop).
    pub newton_converged: bool,
    /// `|x^(i+1) - x^(i)|_2` per outer iteration.
    pub step_trace: Vec<f64>,
    pub x_trace: Vec<Vec<f64>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationReport {
    pub variant: EgleVariant,
    pub x_hat: Vec<f64>,
    pub m_star: usize,
    /// `(m, BIC)` for m = 1..=m_max.
    pub bic_trace: Vec<(usize, f64)>,
    pub per_m: Vec<ComponentRun>,
    pub noise_c: GmmSpec,
    pub noise_d: Option<GmmSpec>,
    pub noise_estimates: NoiseEstimates,
    pub outer_iterations: usize,
    pub converged: bool,
    pub elapsed_ms: f64,
}

impl EstimationReport {
    pub fn selected(&self) -> &ComponentRun {
        &self.per_m[self.m_star - 1]
    }
}

struct RunState {
    summary: ComponentRun,
    noise: NoiseEstimates,
}

fn starting_point(sys: &RegressionSystem, cfg: &EgleConfig) -> Result<DVector<f64>> {
    match &cfg.x0 {
        Some(v) if v.len() != sys.params() => Err(Error::Config(format!(
            "egle.x0 has {} entries, system has {} parameters",
            v.len(),
            sys.params()
        ))),
        Some(v) => Ok(DVector::from_column_slice(v)),
        None => ls_estimate(sys),
    }
}

fn fit(samples: &[f64], m: usize, prev: Option<&GmmSpec>, cfg: &EgleConfig) -> Result<EmFit> {
    match prev {
        Some(spec) if cfg.warm_start => em_fit_from(samples, spec, &cfg.em),
        _ => em_fit(samples, m, &cfg.em),
    }
}

fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n
}

fn failed(m: usize, e: &Error) -> ComponentRun {
    ComponentRun {
        m,
        bic: f64::INFINITY,
        x: None,
        loglik_c: None,
        loglik_d: None,
        noise_c: None,
        noise_d: None,
        outer_iterations: 0,
        converged: false,
        newton_converged: false,
        step_trace: Vec::new(),
        x_trace: Vec::new(),
        error: Some(e.to_string()),
    }
}

fn run_dependent(sys: &RegressionSystem, m: usize, x0: &DVector<f64>, cfg: &EgleConfig) -> Result<RunState> {
    let mut x = x0.clone();
    let mut resid = sys.residual(&x);
    let mut spec: Option<GmmSpec> = None;
    let mut step_trace = Vec::new();
    let mut x_trace = vec![x.as_slice().to_vec()];
    let mut converged = false;
    let mut clustered = None;
    for _ in 0..cfg.i_max {
        let em = fit(resid.as_slice(), m, spec.as_ref(), cfg)?;
        let assignment = cluster_assign(&em.responsibilities);
        let cs = ClusteredSystem::new(sys, &assignment, em.spec.clone(), None)?;
        let next = gmm_dep_estimate(&cs)?;
        let step = (&next - &x).norm();
        x = next;
        resid = sys.residual(&x);
        spec = Some(em.spec);
        step_trace.push(step);
        x_trace.push(x.as_slice().to_vec());
        clustered = Some(cs);
        if step < cfg.eps1 {
            converged = true;
            break;
        }
    }
    let cs = clustered.expect("i_max >= 1");
    let spec = spec.expect("i_max >= 1");
    let loglik = gmm::log_likelihood(resid.as_slice(), &spec)?;
    let lambdas = eiv_residual(&x, &cs)?.lambdas;
    let noise = recover_noise(&x, &lambdas, &cs)?;
    Ok(RunState {
        summary: ComponentRun {
            m,
            bic: gmm::bic(loglik, m, sys.rows()),
            x: Some(x.as_slice().to_vec()),
            loglik_c: Some(loglik),
            loglik_d: None,
            noise_c: Some(spec),
            noise_d: None,
            outer_iterations: step_trace.len(),
            converged,
            newton_converged: true,
            step_trace,
            x_trace,
            error: None,
        },
        noise,
    })
}

/// Conditional variances of `c_e` and of `D_e` (column-major) given the
/// residual, per row from the row's cluster.
fn posterior_variances(x: &DVector<f64>, cs: &ClusteredSystem) -> (Vec<f64>, Vec<f64>) {
    let (n, p) = (cs.rows(), cs.params());
    let xx = x.norm_squared();
    let mut pv_c = vec![0.0; n];
    let mut pv_d = vec![0.0; n * p];
    for (g, cluster) in cs.clusters.iter().enumerate() {
        let var_c = cs.noise_c.variances[g];
        let (_, var_d) = cs.d_noise(g);
        let var_net = var_c + var_d * xx;
        for &row in &cluster.rows {
            pv_c[row] = var_c - var_c * var_c / var_net;
            for j in 0..p {
                pv_d[j * n + row] = var_d - var_d * var_d * x[j] * x[j] / var_net;
            }
        }
    }
    (pv_c, pv_d)
}

/// `var_k += sum_i r_ik pv_i / sum_i r_ik`.
fn inflate(fit: &mut EmFit, pv: &[f64]) {
    let sums = fit.responsibilities.column_sums();
    for (k, var) in fit.spec.variances.iter_mut().enumerate() {
        if sums[k] > 0.0 {
            let add: f64 = pv.iter().enumerate().map(|(i, v)| fit.responsibilities.get(i, k) * v).sum();
            *var += add / sums[k];
        }
    }
}

/// Mixtures are matched across c and D by ascending mean.
fn paired_system(
    sys: &RegressionSystem,
    fit_c: &EmFit,
    fit_d: &EmFit,
) -> Result<ClusteredSystem> {
    let (spec_c, perm) = fit_c.spec.sorted_by_mean();
    let (spec_d, _) = fit_d.spec.sorted_by_mean();
    let resp = fit_c.responsibilities.permuted(&perm);
    ClusteredSystem::new(sys, &cluster_assign(&resp), spec_c, Some(spec_d))
}

fn run_full(sys: &RegressionSystem, m: usize, x0: &DVector<f64>, cfg: &EgleConfig) -> Result<RunState> {
    let mut x = x0.clone();
    // zero-mean Gaussian start, net variance split evenly per unit weight
    let v0 = sample_variance(sys.residual(&x).as_slice()).max(cfg.em.variance_floor);
    let share = v0 / (1.0 + x.norm_squared());
    let init = GmmSpec::gaussian(0.0, share)?;
    let mut cs = ClusteredSystem::single(sys, init.clone(), Some(init))?;
    let mut spec_c: Option<GmmSpec> = None;
    let mut spec_d: Option<GmmSpec> = None;
    let mut step_trace = Vec::new();
    let mut x_trace = vec![x.as_slice().to_vec()];
    let mut converged = false;
    let mut newton_converged = true;
    for _ in 0..cfg.i_max {
        let lambdas = eiv_residual(&x, &cs)?.lambdas;
        let noise = recover_noise(&x, &lambdas, &cs)?;
        let mut fit_c = fit(noise.c_e.as_slice(), m, spec_c.as_ref(), cfg)?;
        let mut fit_d = fit(noise.d_e.as_slice(), m, spec_d.as_ref(), cfg)?;
        if cfg.posterior_variance {
            let (pv_c, pv_d) = posterior_variances(&x, &cs);
            inflate(&mut fit_c, &pv_c);
            inflate(&mut fit_d, &pv_d);
        }
        cs = paired_system(sys, &fit_c, &fit_d)?;
        spec_c = Some(cs.noise_c.clone());
        spec_d = cs.noise_d.clone();
        let out = eiv_newton_solve(&cs, &x, &cfg.newton)?;
        newton_converged &= out.converged;
        let step = (&out.x - &x).norm();
        x = out.x;
        step_trace.push(step);
        x_trace.push(x.as_slice().to_vec());
        if step < cfg.eps1 {
            converged = true;
            break;
        }
    }
    let lambdas = eiv_residual(&x, &cs)?.lambdas;
    let noise = recover_noise(&x, &lambdas, &cs)?;
    let spec_c = spec_c.expect("i_max >= 1");
    let spec_d = spec_d.expect("i_max >= 1");
    let loglik_c = gmm::log_likelihood(noise.c_e.as_slice(), &spec_c)?;
    let loglik_d = gmm::log_likelihood(noise.d_e.as_slice(), &spec_d)?;
    let (n, np) = (sys.rows(), sys.rows() * sys.params());
    let bic = gmm::bic(loglik_c, m, n) + gmm::bic(loglik_d, m, np);
    Ok(RunState {
        summary: ComponentRun {
            m,
            bic,
            x: Some(x.as_slice().to_vec()),
            loglik_c: Some(loglik_c),
            loglik_d: Some(loglik_d),
            noise_c: Some(spec_c),
            noise_d: Some(spec_d),
            outer_iterations: step_trace.len(),
            converged,
            newton_converged,
            step_trace,
            x_trace,
            error: None,
        },
        noise,
    })
}

fn sweep(sys: &RegressionSystem, cfg: &EgleConfig, variant: EgleVariant) -> Result<EstimationReport> {
    let start = Instant::now();
    cfg.validate()?;
    let x0 = starting_point(sys, cfg)?;
    let runs: Vec<std::result::Result<RunState, ComponentRun>> = par::map_indexed(cfg.execution, cfg.m_max, |k| {
        let m = k + 1;
        let out = match variant {
            EgleVariant::Dependent => run_dependent(sys, m, &x0, cfg),
            EgleVariant::Full => run_full(sys, m, &x0, cfg),
        };
        out.and_then(|r| {
            if r.summary.bic.is_finite() {
                Ok(r)
            } else {
                Err(Error::Infeasible(format!("non-finite BIC for m = {m}")))
            }
        })
        .map_err(|e| failed(m, &e))
    });
    let bic_trace: Vec<(usize, f64)> = runs
        .iter()
        .map(|r| match r {
            Ok(s) => (s.summary.m, s.summary.bic),
            Err(f) => (f.m, f.bic),
        })
        .collect();
    let m_star = bic_trace
        .iter()
        .filter(|(_, b)| b.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(m, _)| *m)
        .ok_or(Error::NoFeasibleOrder)?;
    let mut per_m = Vec::with_capacity(runs.len());
    let mut best = None;
    for r in runs {
        match r {
            Ok(state) => {
                per_m.push(state.summary.clone());
                if state.summary.m == m_star {
                    best = Some(state);
                }
            }
            Err(f) => per_m.push(f),
        }
    }
    let best = best.expect("m_star has a finite run");
    let s = best.summary;
    Ok(EstimationReport {
        variant,
        x_hat: s.x.clone().expect("successful run"),
        m_star,
        bic_trace,
        noise_c: s.noise_c.clone().expect("successful run"),
        noise_d: s.noise_d.clone(),
        noise_estimates: best.noise,
        outer_iterations: s.outer_iterations,
        converged: s.converged,
        per_m,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Dependent-noise loop: D is treated as exact.
pub fn egle_dependent(sys: &RegressionSystem, cfg: &EgleConfig) -> Result<EstimationReport> {
    sweep(sys, cfg, EgleVariant::Dependent)
}

/// Full errors-in-variables loop with noise in both c and D.
pub fn egle_full(sys: &RegressionSystem, cfg: &EgleConfig) -> Result<EstimationReport> {
    sweep(sys, cfg, EgleVariant::Full)
}
