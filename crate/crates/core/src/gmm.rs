//! Scalar Gaussian mixture models fitted by expectation-maximization.
//!
//! All density evaluations happen in log space with a log-sum-exp over
//! components, so per-unit noise with variances around 1e-6 never underflows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const WEIGHT_SUM_TOL: f64 = 1e-12;
const EMPTY_COLUMN_MASS: f64 = 1e-300;

/// Weights, means and variances of a one-dimensional Gaussian mixture.
///
/// Generator specs may carry zero variances (a point mass, used for exact
/// noise-free scenarios). Specs returned by [`em_fit`] always have every
/// variance at or above the configured floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl GmmSpec {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let spec = GmmSpec {
            weights,
            means,
            variances,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Build a spec from standard deviations instead of variances.
    pub fn from_std(weights: Vec<f64>, means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        let variances = stds.iter().map(|s| s * s).collect();
        Self::new(weights, means, variances)
    }

    pub fn gaussian(mean: f64, variance: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    /// Point mass at zero: injects no noise at all.
    pub fn zero() -> Self {
        GmmSpec {
            weights: vec![1.0],
            means: vec![0.0],
            variances: vec![0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.weights.len();
        if m == 0 {
            return Err(Error::InvalidSpec("at least one component required".into()));
        }
        if self.means.len() != m || self.variances.len() != m {
            return Err(Error::InvalidSpec(format!(
                "length mismatch: {} weights, {} means, {} variances",
                m,
                self.means.len(),
                self.variances.len()
            )));
        }
        let mut sum = 0.0;
        for (g, &w) in self.weights.iter().enumerate() {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidSpec(format!("weight {g} is {w}")));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL * m as f64 {
            return Err(Error::InvalidSpec(format!("weights sum to {sum}")));
        }
        for g in 0..m {
            if !self.means[g].is_finite() {
                return Err(Error::InvalidSpec(format!("mean {g} is not finite")));
            }
            let v = self.variances[g];
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidSpec(format!("variance {g} is {v}")));
            }
        }
        Ok(())
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(w, (m, v))| w * (v + (m - mu) * (m - mu)))
            .sum()
    }

    /// Multiply every mean by `factor` and every standard deviation by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        GmmSpec {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m * factor).collect(),
            variances: self.variances.iter().map(|v| v * factor * factor).collect(),
        }
    }

    /// Components reordered by ascending mean, plus the permutation used
    /// (`perm[new] = old`).
    pub fn sorted_by_mean(&self) -> (Self, Vec<usize>) {
        let mut perm: Vec<usize> = (0..self.components()).collect();
        perm.sort_by(|&a, &b| self.means[a].total_cmp(&self.means[b]).then(a.cmp(&b)));
        let spec = GmmSpec {
            weights: perm.iter().map(|&g| self.weights[g]).collect(),
            means: perm.iter().map(|&g| self.means[g]).collect(),
            variances: perm.iter().map(|&g| self.variances[g]).collect(),
        };
        (spec, perm)
    }

    /// Draw one value: pick a component by weight, then a Gaussian draw.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.draw_labeled(rng).1
    }

    /// Like [`GmmSpec::draw`] but also reports the component picked.
    pub fn draw_labeled<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, f64) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components() - 1;
        for (g, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = g;
                break;
            }
        }
        let z: f64 = rng.sample(StandardNormal);
        (pick, self.means[pick] + self.variances[pick].sqrt() * z)
    }

    fn log_terms(&self) -> Result<LogTerms> {
        let m = self.components();
        let mut log_w = Vec::with_capacity(m);
        let mut inv_var = Vec::with_capacity(m);
        let mut log_norm = Vec::with_capacity(m);
        for g in 0..m {
            let v = self.variances[g];
            if v <= 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "variance {g} must be positive to evaluate densities"
                )));
            }
            log_w.push(self.weights[g].ln());
            inv_var.push(1.0 / v);
            log_norm.push(-0.5 * (LN_2PI + v.ln()));
        }
        Ok(LogTerms {
            log_w,
            inv_var,
            log_norm,
        })
    }
}

struct LogTerms {
    log_w: Vec<f64>,
    inv_var: Vec<f64>,
    log_norm: Vec<f64>,
}

impl LogTerms {
    /// Fill `out[g] = log(w_g N(s; mu_g, var_g))` and return the log-sum-exp.
    #[inline]
    fn joint(&self, spec: &GmmSpec, s: f64, out: &mut [f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for g in 0..out.len() {
            let d = s - spec.means[g];
            let l = self.log_w[g] + self.log_norm[g] - 0.5 * d * d * self.inv_var[g];
            out[g] = l;
            if l > max {
                max = l;
            }
        }
        if max == f64::NEG_INFINITY {
            return max;
        }
        let sum: f64 = out.iter().map(|l| (l - max).exp()).sum();
        max + sum.ln()
    }

    /// Like [`LogTerms::joint`] but leaves the normalized posterior in `out`.
    #[inline]
    fn posterior(&self, spec: &GmmSpec, s: f64, out: &mut [f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for g in 0..out.len() {
            let d = s - spec.means[g];
            let l = self.log_w[g] + self.log_norm[g] - 0.5 * d * d * self.inv_var[g];
            out[g] = l;
            if l > max {
                max = l;
            }
        }
        if max == f64::NEG_INFINITY {
            return max;
        }
        let mut sum = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in out.iter_mut() {
            *v *= inv;
        }
        max + sum.ln()
    }
}

/// Row-stochastic n x m matrix of posterior component probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    n: usize,
    m: usize,
    values: Vec<f64>,
}

impl Responsibilities {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if m == 0 {
            return Err(Error::Dimension("empty responsibility matrix".into()));
        }
        let mut values = Vec::with_capacity(n * m);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Dimension(format!("row {i} has {} entries", row.len())));
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (sum - 1.0).abs() > 1e-10 {
                return Err(Error::Dimension(format!("row {i} is not a probability vector")));
            }
            values.extend_from_slice(row);
        }
        Ok(Responsibilities { n, m, values })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn components(&self) -> usize {
        self.m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn get(&self, i: usize, g: usize) -> f64 {
        self.values[i * self.m + g]
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.m];
        for row in self.values.chunks_exact(self.m) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    /// Reorder columns so that new column `k` is old column `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks_exact(self.m) {
            values.extend(perm.iter().map(|&g| row[g]));
        }
        Responsibilities {
            n: self.n,
            m: self.m,
            values,
        }
    }
}

/// Hard memberships derived from responsibilities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub index_sets: Vec<Vec<usize>>,
}

impl ClusterAssignment {
    /// Every row in component 0.
    pub fn single(n: usize) -> Self {
        Self::from_labels(vec![0; n], 1)
    }

    pub fn from_labels(labels: Vec<usize>, m: usize) -> Self {
        let mut index_sets = vec![Vec::new(); m];
        for (i, &g) in labels.iter().enumerate() {
            index_sets[g].push(i);
        }
        ClusterAssignment { labels, index_sets }
    }

    pub fn counts(&self) -> Vec<usize> {
        self.index_sets.iter().map(Vec::len).collect()
    }

    pub fn components(&self) -> usize {
        self.index_sets.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// Sort, split into m equal-count bins, use bin moments.
    QuantileSplit,
    /// k-means++ seeding from `seed`, refined by Lloyd iterations; cluster moments.
    RandomSeeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop once the log-likelihood changes by less than this many nats.
    pub tol: f64,
    pub variance_floor: f64,
    pub init_strategy: InitStrategy,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 500,
            tol: 1e-6,
            variance_floor: 1e-12,
            init_strategy: InitStrategy::QuantileSplit,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::Config("em.max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("em.tol must be positive".into()));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::Config("em.variance_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of an EM run.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub spec: GmmSpec,
    pub responsibilities: Responsibilities,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood after the initial E-step and after every iteration.
    pub loglik_trace: Vec<f64>,
}

fn check_samples(samples: &[f64]) -> Result<()> {
    match samples.iter().position(|s| !s.is_finite()) {
        Some(index) => Err(Error::InvalidSample {
            index,
            value: samples[index],
        }),
        None => Ok(()),
    }
}

fn moments(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    (mean, var)
}

/// E-step plus log-likelihood in one pass.
fn expectation(samples: &[f64], spec: &GmmSpec) -> Result<(Responsibilities, f64)> {
    check_samples(samples)?;
    let terms = spec.log_terms()?;
    let m = spec.components();
    let mut values = vec![0.0; samples.len() * m];
    let mut loglik = 0.0;
    for (s, row) in samples.iter().zip(values.chunks_exact_mut(m)) {
        loglik += terms.posterior(spec, *s, row);
    }
    Ok((
        Responsibilities {
            n: samples.len(),
            m,
            values,
        },
        loglik,
    ))
}

/// Posterior component probabilities for every sample.
pub fn e_step(samples: &[f64], spec: &GmmSpec) -> Result<Responsibilities> {
    expectation(samples, spec).map(|(r, _)| r)
}

/// Weighted-moment update of weights, means and variances.
pub fn m_step(samples: &[f64], resp: &Responsibilities, variance_floor: f64) -> Result<GmmSpec> {
    if resp.rows() != samples.len() {
        return Err(Error::Dimension(format!(
            "{} samples but {} responsibility rows",
            samples.len(),
            resp.rows()
        )));
    }
    let m = resp.components();
    let n = samples.len() as f64;
    let mut mass = vec![0.0; m];
    let mut first = vec![0.0; m];
    for (i, &s) in samples.iter().enumerate() {
        for (g, &gamma) in resp.row(i).iter().enumerate() {
            mass[g] += gamma;
            first[g] += gamma * s;
        }
    }
    if let Some(component) = mass.iter().position(|&w| w < EMPTY_COLUMN_MASS) {
        return Err(Error::EmptyComponent { component });
    }
    let means: Vec<f64> = first.iter().zip(&mass).map(|(f, w)| f / w).collect();
    let mut second = vec![0.0; m];
    for (i, &s) in samples.iter().enumerate() {
        for (g, &gamma) in resp.row(i).iter().enumerate() {
            let d = s - means[g];
            second[g] += gamma * d * d;
        }
    }
    let variances = second
        .iter()
        .zip(&mass)
        .map(|(q, w)| (q / w).max(variance_floor))
        .collect();
    let weights = mass.iter().map(|w| w / n).collect();
    Ok(GmmSpec {
        weights,
        means,
        variances,
    })
}

/// Row-wise argmax; ties go to the lowest component index.
pub fn cluster_assign(resp: &Responsibilities) -> ClusterAssignment {
    let labels = (0..resp.rows())
        .map(|i| {
            let row = resp.row(i);
            let mut best = 0;
            for g in 1..row.len() {
                if row[g] > row[best] {
                    best = g;
                }
            }
            best
        })
        .collect();
    ClusterAssignment::from_labels(labels, resp.components())
}

/// Total log-likelihood of the samples under the mixture, in nats.
pub fn log_likelihood(samples: &[f64], spec: &GmmSpec) -> Result<f64> {
    check_samples(samples)?;
    let terms = spec.log_terms()?;
    let mut buf = vec![0.0; spec.components()];
    Ok(samples.iter().map(|&s| terms.joint(spec, s, &mut buf)).sum())
}

/// Free parameters of an m-component scalar mixture.
pub fn free_parameters(m: usize) -> usize {
    3 * m - 1
}

/// Bayesian information criterion, `k ln n - 2 loglik` with `k = 3m - 1`.
pub fn bic(loglik: f64, m: usize, n: usize) -> f64 {
    bic_with_parameters(loglik, free_parameters(m), n)
}

pub fn bic_with_parameters(loglik: f64, k: usize, n: usize) -> f64 {
    k as f64 * (n as f64).ln() - 2.0 * loglik
}

/// Deterministic starting mixture for EM.
pub fn initial_spec(samples: &[f64], m: usize, cfg: &EmConfig) -> Result<GmmSpec> {
    let n = samples.len();
    if n < m {
        return Err(Error::InsufficientSamples { needed: m, got: n });
    }
    let floor = cfg.variance_floor;
    match cfg.init_strategy {
        InitStrategy::QuantileSplit => {
            let mut sorted = samples.to_vec();
            sorted.sort_by(f64::total_cmp);
            let mut weights = Vec::with_capacity(m);
            let mut means = Vec::with_capacity(m);
            let mut variances = Vec::with_capacity(m);
            for g in 0..m {
                let bin = &sorted[g * n / m..(g + 1) * n / m];
                let (mu, var) = moments(bin);
                weights.push(bin.len() as f64 / n as f64);
                means.push(mu);
                variances.push(var.max(floor));
            }
            Ok(GmmSpec {
                weights,
                means,
                variances,
            })
        }
        InitStrategy::RandomSeeded => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let centers = lloyd(samples, kmeans_pp(samples, m, &mut rng));
            Ok(cluster_moments(samples, &centers, floor))
        }
    }
}

/// k-means++ seeding: each further center is a sample drawn with probability
/// proportional to its squared distance from the nearest chosen center.
fn kmeans_pp(samples: &[f64], m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centers = vec![samples[rng.random_range(0..samples.len())]];
    let mut dist: Vec<f64> = samples.iter().map(|s| (s - centers[0]).powi(2)).collect();
    while centers.len() < m {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            dist.iter()
                .position(|&d| {
                    u -= d;
                    u <= 0.0
                })
                .unwrap_or(samples.len() - 1)
        } else {
            rng.random_range(0..samples.len())
        };
        let c = samples[pick];
        centers.push(c);
        for (d, s) in dist.iter_mut().zip(samples) {
            *d = d.min((s - c).powi(2));
        }
    }
    centers
}

fn nearest(centers: &[f64], s: f64) -> usize {
    let mut best = 0;
    for g in 1..centers.len() {
        if (s - centers[g]).abs() < (s - centers[best]).abs() {
            best = g;
        }
    }
    best
}

fn lloyd(samples: &[f64], mut centers: Vec<f64>) -> Vec<f64> {
    let m = centers.len();
    for _ in 0..100 {
        let mut sum = vec![0.0; m];
        let mut count = vec![0usize; m];
        for &s in samples {
            let g = nearest(&centers, s);
            sum[g] += s;
            count[g] += 1;
        }
        let next: Vec<f64> = (0..m)
            .map(|g| if count[g] > 0 { sum[g] / count[g] as f64 } else { centers[g] })
            .collect();
        if next == centers {
            break;
        }
        centers = next;
    }
    centers
}

/// Hard-assignment moments around `centers`; empty clusters keep their center
/// with the pooled variance and a single sample's weight.
fn cluster_moments(samples: &[f64], centers: &[f64], floor: f64) -> GmmSpec {
    let m = centers.len();
    let (_, pooled) = moments(samples);
    let mut groups = vec![Vec::new(); m];
    for &s in samples {
        groups[nearest(centers, s)].push(s);
    }
    let mut spec = GmmSpec {
        weights: Vec::with_capacity(m),
        means: Vec::with_capacity(m),
        variances: Vec::with_capacity(m),
    };
    for (g, group) in groups.iter().enumerate() {
        let (w, mu, var) = if group.len() > 1 {
            let (mu, var) = moments(group);
            (group.len() as f64, mu, var)
        } else {
            (1.0, centers[g], pooled)
        };
        spec.weights.push(w);
        spec.means.push(mu);
        spec.variances.push(var.max(floor));
    }
    let total: f64 = spec.weights.iter().sum();
    spec.weights.iter_mut().for_each(|w| *w /= total);
    spec
}

/// EM iterations given to every start in [`select_order`] before the best one is kept.
pub const SHORT_RUN_ITERATIONS: usize = 30;

/// Fit an m-component mixture from the configured initialization.
pub fn em_fit(samples: &[f64], m: usize, cfg: &EmConfig) -> Result<EmFit> {
    if m == 0 {
        return Err(Error::InvalidSpec("component count must be positive".into()));
    }
    if samples.len() < m {
        return Err(Error::InsufficientSamples {
            needed: m,
            got: samples.len(),
        });
    }
    check_samples(samples)?;
    degenerate_guard(samples, m, cfg.variance_floor)?;
    let init = initial_spec(samples, m, cfg)?;
    em_iterate(samples, init, cfg)
}

/// Fit starting from an existing mixture (warm start).
pub fn em_fit_from(samples: &[f64], init: &GmmSpec, cfg: &EmConfig) -> Result<EmFit> {
    let m = init.components();
    if samples.len() < m {
        return Err(Error::InsufficientSamples {
            needed: m,
            got: samples.len(),
        });
    }
    check_samples(samples)?;
    degenerate_guard(samples, m, cfg.variance_floor)?;
    let mut start = init.clone();
    for v in &mut start.variances {
        *v = v.max(cfg.variance_floor);
    }
    em_iterate(samples, start, cfg)
}

fn degenerate_guard(samples: &[f64], m: usize, floor: f64) -> Result<()> {
    if m > 1 {
        let (_, variance) = moments(samples);
        if variance <= floor {
            return Err(Error::DegenerateData {
                variance,
                components: m,
            });
        }
    }
    Ok(())
}

fn em_iterate(samples: &[f64], init: GmmSpec, cfg: &EmConfig) -> Result<EmFit> {
    cfg.validate()?;
    let mut spec = init;
    let (mut resp, mut loglik) = expectation(samples, &spec)?;
    let mut trace = vec![loglik];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        spec = m_step(samples, &resp, cfg.variance_floor)?;
        let (next_resp, next_ll) = expectation(samples, &spec)?;
        let delta = next_ll - loglik;
        resp = next_resp;
        loglik = next_ll;
        trace.push(loglik);
        if delta.abs() < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(EmFit {
        spec,
        responsibilities: resp,
        loglik,
        iterations,
        converged,
        loglik_trace: trace,
    })
}

/// `n` deterministic draws from the mixture.
pub fn gmm_sample(spec: &GmmSpec, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| spec.draw(&mut rng)).collect()
}

/// One row of a BIC sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderScore {
    pub m: usize,
    /// `+inf` when every EM attempt for this order failed.
    pub bic: f64,
    pub loglik: Option<f64>,
    pub spec: Option<GmmSpec>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderSelection {
    pub best_m: usize,
    pub scores: Vec<OrderScore>,
}

/// Fit m = 1..=m_max and pick the order with the lowest BIC.
///
/// Each order gets one quantile-split start plus `restarts` random-seeded
/// starts, each run for a short burn-in; the start with the highest
/// likelihood is then iterated to convergence and scored.
pub fn select_order(
    samples: &[f64],
    m_max: usize,
    cfg: &EmConfig,
    restarts: usize,
    exec: Execution,
) -> Result<OrderSelection> {
    if m_max == 0 {
        return Err(Error::Config("m_max must be at least 1".into()));
    }
    let n = samples.len();
    let scores = par::map_indexed(exec, m_max, |k| {
        let m = k + 1;
        let mut best: Option<EmFit> = None;
        let mut last_err = None;
        for attempt in 0..=restarts {
            let attempt_cfg = if attempt == 0 {
                EmConfig {
                    init_strategy: InitStrategy::QuantileSplit,
                    max_iter: cfg.max_iter.min(SHORT_RUN_ITERATIONS),
                    ..cfg.clone()
                }
            } else {
                EmConfig {
                    init_strategy: InitStrategy::RandomSeeded,
                    seed: cfg.seed.wrapping_add(1000 * m as u64 + attempt as u64),
                    max_iter: cfg.max_iter.min(SHORT_RUN_ITERATIONS),
                    ..cfg.clone()
                }
            };
            match em_fit(samples, m, &attempt_cfg) {
                Ok(fit) => {
                    if best.as_ref().is_none_or(|b| fit.loglik > b.loglik) {
                        best = Some(fit);
                    }
                }
                Err(e) => last_err = Some(e.to_string()),
            }
        }
        let best = match best {
            Some(fit) if !fit.converged && cfg.max_iter > SHORT_RUN_ITERATIONS => {
                let rest = EmConfig {
                    max_iter: cfg.max_iter - SHORT_RUN_ITERATIONS,
                    ..cfg.clone()
                };
                match em_fit_from(samples, &fit.spec, &rest) {
                    Ok(full) => Some(full),
                    Err(e) => {
                        last_err = Some(e.to_string());
                        None
                    }
                }
            }
            other => other,
        };
        match best {
            Some(fit) => OrderScore {
                m,
                bic: bic(fit.loglik, m, n),
                loglik: Some(fit.loglik),
                spec: Some(fit.spec),
                error: None,
            },
            None => OrderScore {
                m,
                bic: f64::INFINITY,
                loglik: None,
                spec: None,
                error: last_err,
            },
        }
    });
    let best_m = argmin_bic(&scores).ok_or(Error::NoFeasibleOrder)?;
    Ok(OrderSelection { best_m, scores })
}

/// Lowest finite BIC, ties to the smaller order.
pub(crate) fn argmin_bic(scores: &[OrderScore]) -> Option<usize> {
    scores
        .iter()
        .filter(|s| s.bic.is_finite())
        .min_by(|a, b| a.bic.total_cmp(&b.bic).then(a.m.cmp(&b.m)))
        .map(|s| s.m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference_two_component() -> GmmSpec {
        GmmSpec::from_std(vec![0.3, 0.7], vec![0.0, 0.005], vec![0.0015, 0.0015]).unwrap()
    }

    fn normal_pdf(x: f64, mu: f64, var: f64) -> f64 {
        (-(x - mu) * (x - mu) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }

    #[test]
    fn seeded_start_lands_on_separated_clusters() {
        let spec = GmmSpec::from_std(vec![0.2, 0.5, 0.3], vec![-1.0, 0.0, 2.0], vec![0.05; 3]).unwrap();
        let data = gmm_sample(&spec, 3000, 4);
        for seed in 0..5 {
            let cfg = EmConfig {
                init_strategy: InitStrategy::RandomSeeded,
                seed,
                ..EmConfig::default()
            };
            let init = initial_spec(&data, 3, &cfg).unwrap();
            let (sorted, _) = init.sorted_by_mean();
            for g in 0..3 {
                assert!((sorted.means[g] - spec.means[g]).abs() < 0.02, "{sorted:?}");
                assert!((sorted.weights[g] - spec.weights[g]).abs() < 0.03);
            }
            assert!((init.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // more centers than distinct values still yields a valid spec
        let init = initial_spec(&[1.0, 1.0, 2.0], 3, &EmConfig {
            init_strategy: InitStrategy::RandomSeeded,
            ..EmConfig::default()
        })
        .unwrap();
        init.validate().unwrap();
    }

    #[test]
    fn single_component_is_sample_moments() {
        let fit = em_fit(&[1.0, 2.0, 3.0], 1, &EmConfig::default()).unwrap();
        assert!((fit.spec.means[0] - 2.0).abs() < 1e-15);
        assert!((fit.spec.variances[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(fit.spec.weights, vec![1.0]);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let err = em_fit(&[0.5; 10], 2, &EmConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateData { components: 2, .. }));
        // one component is fine: the variance is floored
        let fit = em_fit(&[0.5; 10], 1, &EmConfig::default()).unwrap();
        assert_eq!(fit.spec.variances[0], 1e-12);
    }

    #[test]
    fn too_few_samples() {
        let err = em_fit(&[0.1, 0.2], 3, &EmConfig::default()).unwrap_err();
        assert_eq!(err, Error::InsufficientSamples { needed: 3, got: 2 });
    }

    #[test]
    fn nan_sample_rejected() {
        let spec = GmmSpec::gaussian(0.0, 1.0).unwrap();
        assert!(matches!(
            e_step(&[0.0, f64::NAN], &spec),
            Err(Error::InvalidSample { index: 1, .. })
        ));
        assert!(matches!(
            log_likelihood(&[f64::NAN], &spec),
            Err(Error::InvalidSample { index: 0, .. })
        ));
    }

    #[test]
    fn e_step_single_and_symmetric() {
        let one = GmmSpec::gaussian(3.0, 2.0).unwrap();
        let r = e_step(&[-1.0, 0.0, 10.0], &one).unwrap();
        for i in 0..3 {
            assert_eq!(r.row(i), &[1.0]);
        }
        let sym = GmmSpec::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let r = e_step(&[0.0], &sym).unwrap();
        assert!((r.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((r.get(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn e_step_matches_density_ratio() {
        let spec = reference_two_component();
        let s = 0.005;
        let a = 0.3 * normal_pdf(s, 0.0, 0.0015 * 0.0015);
        let b = 0.7 * normal_pdf(s, 0.005, 0.0015 * 0.0015);
        let r = e_step(&[s], &spec).unwrap();
        assert!((r.get(0, 0) - a / (a + b)).abs() < 1e-12);
        assert!((r.get(0, 1) - b / (a + b)).abs() < 1e-12);
    }

    #[test]
    fn e_step_survives_far_tails() {
        // direct-space densities underflow to zero here
        let spec = GmmSpec::new(vec![0.5, 0.5], vec![0.0, 1.0], vec![1e-8, 1e-8]).unwrap();
        let r = e_step(&[100.0], &spec).unwrap();
        assert!((r.get(0, 1) - 1.0).abs() < 1e-12);
        assert!(log_likelihood(&[100.0], &spec).unwrap().is_finite());
    }

    #[test]
    fn m_step_moments_and_hard_assignments() {
        let resp = Responsibilities::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let spec = m_step(&[2.0, 4.0], &resp, 1e-12).unwrap();
        assert_eq!(spec.weights, vec![1.0]);
        assert!((spec.means[0] - 3.0).abs() < 1e-15);
        assert!((spec.variances[0] - 1.0).abs() < 1e-15);

        let samples = [1.0, 2.0, 10.0, 12.0, 14.0];
        let rows: Vec<Vec<f64>> = [0, 0, 1, 1, 1]
            .iter()
            .map(|&g| if g == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
            .collect();
        let spec = m_step(&samples, &Responsibilities::from_rows(&rows).unwrap(), 1e-12).unwrap();
        assert_eq!(spec.means, vec![1.5, 12.0]);
        assert_eq!(spec.variances, vec![0.25, 8.0 / 3.0]);
        assert_eq!(spec.weights, vec![0.4, 0.6]);
    }

    #[test]
    fn m_step_matches_weighted_moment_oracle() {
        let samples = [0.3, -1.2, 2.5, 0.8, 1.1];
        let gammas = [0.2, 0.9, 0.35, 0.6, 0.05];
        let rows: Vec<Vec<f64>> = gammas.iter().map(|&g| vec![g, 1.0 - g]).collect();
        let spec = m_step(&samples, &Responsibilities::from_rows(&rows).unwrap(), 1e-12).unwrap();
        for g in 0..2 {
            let w: Vec<f64> = gammas.iter().map(|&a| if g == 0 { a } else { 1.0 - a }).collect();
            let mass: f64 = w.iter().sum();
            let mu: f64 = w.iter().zip(&samples).map(|(a, s)| a * s).sum::<f64>() / mass;
            let var: f64 =
                w.iter().zip(&samples).map(|(a, s)| a * (s - mu) * (s - mu)).sum::<f64>() / mass;
            assert!((spec.weights[g] - mass / 5.0).abs() < 1e-14);
            assert!((spec.means[g] - mu).abs() < 1e-14);
            assert!((spec.variances[g] - var).abs() < 1e-14);
        }
    }

    #[test]
    fn m_step_empty_component() {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let err = m_step(&[1.0, 2.0], &Responsibilities::from_rows(&rows).unwrap(), 1e-12);
        assert_eq!(err.unwrap_err(), Error::EmptyComponent { component: 1 });
    }

    #[test]
    fn cluster_assign_argmax_and_ties() {
        let resp =
            Responsibilities::from_rows(&[vec![0.9, 0.1], vec![0.5, 0.5], vec![0.2, 0.8]]).unwrap();
        let a = cluster_assign(&resp);
        assert_eq!(a.labels, vec![0, 0, 1]);
        assert_eq!(a.index_sets, vec![vec![0, 1], vec![2]]);
        assert_eq!(a.counts(), vec![2, 1]);
    }

    #[test]
    fn log_likelihood_closed_form_and_collapse() {
        let std_normal = GmmSpec::gaussian(0.0, 1.0).unwrap();
        let ll = log_likelihood(&[0.0], &std_normal).unwrap();
        assert!((ll - (-0.918_938_533_204_672_7)).abs() < 1e-15);

        let samples = gmm_sample(&reference_two_component(), 50, 3);
        let one = GmmSpec::gaussian(0.001, 4e-6).unwrap();
        let two = GmmSpec::new(vec![0.5, 0.5], vec![0.001; 2], vec![4e-6; 2]).unwrap();
        let a = log_likelihood(&samples, &one).unwrap();
        let b = log_likelihood(&samples, &two).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs());
    }

    #[test]
    fn log_likelihood_matches_naive_sum() {
        let spec = reference_two_component();
        let samples = gmm_sample(&spec, 100, 11);
        let naive: f64 = samples
            .iter()
            .map(|&s| {
                (0..2)
                    .map(|g| spec.weights[g] * normal_pdf(s, spec.means[g], spec.variances[g]))
                    .sum::<f64>()
                    .ln()
            })
            .sum();
        let ll = log_likelihood(&samples, &spec).unwrap();
        assert!((ll - naive).abs() < 1e-9);
    }

    #[test]
    fn bic_formula() {
        let v = bic(-500.0, 1, 100);
        assert!((v - (2.0 * 100f64.ln() + 1000.0)).abs() < 1e-12);
        assert!((v - 1009.21).abs() < 0.01);
        for m in 1..10 {
            assert!(bic(-500.0, m + 1, 100) > bic(-500.0, m, 100));
        }
    }

    #[test]
    fn sampling_determinism_and_point_mass() {
        let spec = reference_two_component();
        assert_eq!(gmm_sample(&spec, 100, 42), gmm_sample(&spec, 100, 42));
        assert_ne!(gmm_sample(&spec, 100, 42), gmm_sample(&spec, 100, 43));
        let point = GmmSpec::gaussian(0.25, 1e-12).unwrap();
        assert!(gmm_sample(&point, 100, 1).iter().all(|s| (s - 0.25).abs() < 1e-5));
        assert!(gmm_sample(&GmmSpec::zero(), 10, 1).iter().all(|&s| s == 0.0));
    }

    #[test]
    fn sampling_component_proportions() {
        let spec = reference_two_component();
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let first = (0..n).filter(|_| spec.draw_labeled(&mut rng).0 == 0).count();
        let frac = first as f64 / n as f64;
        assert!((frac - 0.3).abs() < 0.01 * 0.3, "{frac}");
        let samples = gmm_sample(&spec, n, 9);
        let mean = samples.iter().sum::<f64>() / n as f64;
        assert!((mean - spec.mean()).abs() < 3.0 * (spec.variance() / n as f64).sqrt());
    }

    #[test]
    fn sorted_by_mean_permutes() {
        let spec = GmmSpec::new(vec![0.2, 0.5, 0.3], vec![3.0, -1.0, 0.5], vec![1.0, 2.0, 3.0])
            .unwrap();
        let (sorted, perm) = spec.sorted_by_mean();
        assert_eq!(perm, vec![1, 2, 0]);
        assert_eq!(sorted.means, vec![-1.0, 0.5, 3.0]);
        assert_eq!(sorted.weights, vec![0.5, 0.3, 0.2]);
    }

    #[test]
    fn spec_validation() {
        assert!(GmmSpec::new(vec![0.5, 0.6], vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(GmmSpec::new(vec![1.0], vec![0.0], vec![-1.0]).is_err());
        assert!(GmmSpec::new(vec![], vec![], vec![]).is_err());
        assert!(GmmSpec::new(vec![1.0], vec![0.0, 1.0], vec![1.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn em_is_monotone(seed in 0u64..1_000_000, m in 1usize..5) {
            let spec = GmmSpec::from_std(
                vec![0.2, 0.5, 0.3], vec![-0.004, 0.0, 0.006], vec![0.001, 0.002, 0.0015],
            ).unwrap();
            let samples = gmm_sample(&spec, 400, seed);
            let cfg = EmConfig { max_iter: 200, tol: 1e-10, ..EmConfig::default() };
            let fit = em_fit(&samples, m, &cfg).unwrap();
            for w in fit.loglik_trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-9, "loglik decreased {} -> {}", w[0], w[1]);
            }
            let total: f64 = fit.spec.weights.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(fit.spec.variances.iter().all(|&v| v >= cfg.variance_floor));
        }

        #[test]
        fn responsibilities_are_row_stochastic(
            samples in proptest::collection::vec(-1.0f64..1.0, 1..50),
            w0 in 0.05f64..0.95,
            mu in -1.0f64..1.0,
            v in 1e-6f64..1.0,
        ) {
            let spec = GmmSpec::new(vec![w0, 1.0 - w0], vec![mu, -mu], vec![v, 2.0 * v]).unwrap();
            let r = e_step(&samples, &spec).unwrap();
            for i in 0..r.rows() {
                let sum: f64 = r.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-10);
                prop_assert!(r.row(i).iter().all(|&g| (0.0..=1.0).contains(&g)));
            }
            let a = cluster_assign(&r);
            let mut seen: Vec<usize> = a.index_sets.concat();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..samples.len()).collect::<Vec<_>>());
            prop_assert_eq!(a.counts().iter().sum::<usize>(), samples.len());
        }
    }
}
