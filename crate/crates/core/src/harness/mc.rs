use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{are_line, estimate, Method, MethodSettings, Metrics, RiIndex, REPORT_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tlpe::{inject_noise, line_params_to_y, simulate_measurements, LineParameters, ScenarioConfig, YVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub runs: usize,
    pub scenario: ScenarioConfig,
    pub methods: Vec<Method>,
    /// Largest relative distance of the random starting point from the truth,
    /// per line parameter.
    pub init_jitter: f64,
    /// Explicit `[lo, hi]` range for the starting distance; overrides `init_jitter`.
    pub ri_range: Option<[f64; 2]>,
    pub base_seed: u64,
    #[serde(flatten)]
    pub settings: MethodSettings,
    /// Scheduling of the independent runs.
    pub execution: Execution,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            runs: 100,
            scenario: ScenarioConfig::default(),
            methods: vec![Method::Ls, Method::Tls, Method::EgleFull],
            init_jitter: 0.3,
            ri_range: None,
            base_seed: 0,
            settings: MethodSettings::default(),
            execution: Execution::default(),
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("mc.runs must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("mc.methods must not be empty".into()));
        }
        let [lo, hi] = self.ri_bounds();
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "initial-guess range [{lo}, {hi}] must satisfy 0 <= lo <= hi < 1"
            )));
        }
        self.scenario.validate()?;
        self.settings.validate()
    }

    pub fn ri_bounds(&self) -> [f64; 2] {
        self.ri_range.unwrap_or([0.0, self.init_jitter])
    }
}

/// Outcome of one method on one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub method: Method,
    pub line: Option<LineParameters>,
    pub y: Option<[f64; 4]>,
    pub are: Option<[f64; 3]>,
    pub are_net: Option<f64>,
    pub converged: Option<bool>,
    pub m_star: Option<usize>,
    /// `(m, BIC)`, null where the order failed.
    pub bic_trace: Option<Vec<(usize, Option<f64>)>>,
    pub box_active: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub x0: LineParameters,
    pub ri: RiIndex,
    pub methods: Vec<MethodRun>,
}

impl RunRecord {
    pub fn method(&self, m: Method) -> Option<&MethodRun> {
        self.methods.iter().find(|r| r.method == m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub successes: usize,
    pub failures: usize,
    /// Successful runs whose iterative solver reported non-convergence.
    pub nonconverged: usize,
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub schema_version: String,
    pub kind: String,
    pub config: McConfig,
    pub true_params: LineParameters,
    pub true_y: [f64; 4],
    pub summaries: Vec<MethodSummary>,
    /// Runs whose starting point was more than the divergence threshold away
    /// from the truth in some parameter.
    pub divergence_flags: usize,
    pub runs: Vec<RunRecord>,
}

impl McReport {
    pub fn summary(&self, m: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == m)
    }

    pub fn metrics(&self, m: Method) -> Option<&Metrics> {
        self.summary(m).and_then(|s| s.metrics.as_ref())
    }

    /// Per-run net ARE of `m`, `None` where it failed.
    pub fn net_ares(&self, m: Method) -> Vec<Option<f64>> {
        self.runs
            .iter()
            .map(|r| r.method(m).and_then(|x| x.are_net))
            .collect()
    }

    /// One row per method and line parameter.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("method,parameter,mare,sdare,median_are,successes,failures\n");
        for s in &self.summaries {
            for (k, name) in ["r", "x", "b"].iter().enumerate() {
                let (mare, sdare, med) = s
                    .metrics
                    .as_ref()
                    .map_or((f64::NAN, f64::NAN, f64::NAN), |m| (m.mare[k], m.sdare[k], m.median_are[k]));
                let _ = writeln!(
                    out,
                    "{},{},{:e},{:e},{:e},{},{}",
                    s.method, name, mare, sdare, med, s.successes, s.failures
                );
            }
        }
        out
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of run `run`, independent of how runs are scheduled.
pub fn run_seed(base_seed: u64, run: usize) -> u64 {
    splitmix64(base_seed ^ splitmix64(run as u64))
}

/// Each parameter moved by a relative distance uniform in `[lo, hi]` with a random sign.
fn jittered(truth: &LineParameters, [lo, hi]: [f64; 2], rng: &mut ChaCha8Rng) -> LineParameters {
    let mut draw = |v: f64| {
        let d = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        v * (1.0 + sign * d)
    };
    LineParameters {
        r: draw(truth.r),
        x: draw(truth.x),
        b: draw(truth.b),
    }
}

fn run_method(method: Method, noisy: &[crate::tlpe::PhasorRecord], x0: &YVector, truth: &LineParameters, settings: &MethodSettings) -> MethodRun {
    let mut out = MethodRun {
        method,
        line: None,
        y: None,
        are: None,
        are_net: None,
        converged: None,
        m_star: None,
        bic_trace: None,
        box_active: None,
        error: None,
    };
    match estimate(method, noisy, x0, settings).and_then(|e| are_line(&e.line, truth).map(|a| (e, a))) {
        Ok((est, a)) => {
            out.line = Some(est.line);
            out.y = Some(est.y);
            out.are = Some(a);
            out.are_net = Some(a.iter().sum());
            out.converged = est.converged;
            out.box_active = est.box_active;
            if let Some(rep) = &est.egle {
                out.m_star = Some(rep.m_star);
                out.bic_trace = Some(
                    rep.bic_trace
                        .iter()
                        .map(|&(m, b)| (m, b.is_finite().then_some(b)))
                        .collect(),
                );
            }
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    out
}

/// Repeated noisy trials on one noise-free scenario. Every method in a run
/// sees the same noisy records and the same starting point.
pub fn monte_carlo_run(cfg: &McConfig) -> Result<McReport> {
    cfg.validate()?;
    let truth = cfg.scenario.true_params;
    let clean = simulate_measurements(&cfg.scenario)?;
    let bounds = cfg.ri_bounds();
    let runs: Vec<Result<RunRecord>> = par::map_indexed(cfg.execution, cfg.runs, |run| {
        let seed = run_seed(cfg.base_seed, run);
        let noisy = inject_noise(&clean, &cfg.scenario.noise_c, &cfg.scenario.noise_d, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let x0 = jittered(&truth, bounds, &mut rng);
        let x0y = line_params_to_y(&x0)?;
        let methods = cfg
            .methods
            .iter()
            .map(|&m| run_method(m, &noisy.noisy, &x0y, &truth, &cfg.settings))
            .collect();
        Ok(RunRecord {
            run,
            seed,
            x0,
            ri: RiIndex::new(&x0, &truth)?,
            methods,
        })
    });
    let runs: Vec<RunRecord> = runs.into_iter().collect::<Result<_>>()?;
    let summaries = cfg
        .methods
        .iter()
        .map(|&m| {
            let results: Vec<&MethodRun> = runs.iter().filter_map(|r| r.method(m)).collect();
            let ares: Vec<[f64; 3]> = results.iter().filter_map(|r| r.are).collect();
            MethodSummary {
                method: m,
                successes: ares.len(),
                failures: results.len() - ares.len(),
                nonconverged: results
                    .iter()
                    .filter(|r| r.are.is_some() && r.converged == Some(false))
                    .count(),
                metrics: Metrics::from_runs(&ares),
            }
        })
        .collect();
    let divergence_flags = runs.iter().filter(|r| r.ri.max() > super::DIVERGENCE_RI).count();
    Ok(McReport {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        kind: "mc".into(),
        config: cfg.clone(),
        true_params: truth,
        true_y: line_params_to_y(&truth)?.0,
        summaries,
        divergence_flags,
        runs,
    })
}

/// Runs where `a` has a strictly smaller net ARE than `b`, out of runs where both succeeded.
pub fn paired_wins(report: &McReport, a: Method, b: Method) -> (usize, usize) {
    let mut wins = 0;
    let mut total = 0;
    for r in &report.runs {
        if let (Some(x), Some(y)) = (
            r.method(a).and_then(|m| m.are_net),
            r.method(b).and_then(|m| m.are_net),
        ) {
            total += 1;
            if x < y {
                wins += 1;
            }
        }
    }
    (wins, total)
}
