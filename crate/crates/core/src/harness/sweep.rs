use serde::{Deserialize, Serialize};

use super::{monte_carlo_run, run_seed, McConfig, McReport, REPORT_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::gmm::{gmm_sample, select_order, EmConfig, GmmSpec};
use crate::par::Execution;

/// Starting points further than this from the truth are flagged as likely to diverge.
pub const DIVERGENCE_RI: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub scale: f64,
    pub report: McReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepReport {
    pub schema_version: String,
    pub kind: String,
    pub levels: Vec<NoiseLevel>,
}

impl NoiseSweepReport {
    /// `scale,method,parameter,mare,median_are` rows.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("scale,method,parameter,mare,median_are\n");
        for level in &self.levels {
            for s in &level.report.summaries {
                if let Some(m) = &s.metrics {
                    for (k, name) in ["r", "x", "b"].iter().enumerate() {
                        out.push_str(&format!(
                            "{},{},{},{:e},{:e}\n",
                            level.scale, s.method, name, m.mare[k], m.median_are[k]
                        ));
                    }
                }
            }
        }
        out
    }
}

/// Monte-Carlo runs with both noise mixtures scaled (means and standard
/// deviations multiplied by each factor). Seeds are shared across levels.
pub fn sensitivity_noise_levels(cfg: &McConfig, scales: &[f64]) -> Result<NoiseSweepReport> {
    if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::Config("noise scales must be positive".into()));
    }
    let levels = scales
        .iter()
        .map(|&scale| {
            let mut c = cfg.clone();
            c.scenario.noise_c = cfg.scenario.noise_c.scaled(scale);
            c.scenario.noise_d = cfg.scenario.noise_d.scaled(scale);
            monte_carlo_run(&c).map(|report| NoiseLevel { scale, report })
        })
        .collect::<Result<_>>()?;
    Ok(NoiseSweepReport {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        kind: "noise_sweep".into(),
        levels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitBin {
    pub ri_range: [f64; 2],
    /// Runs with some starting distance above [`DIVERGENCE_RI`].
    pub flagged: usize,
    pub report: McReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSweepReport {
    pub schema_version: String,
    pub kind: String,
    pub bins: Vec<InitBin>,
}

impl InitSweepReport {
    /// `ri_lo,ri_hi,method,parameter,mare,median_are,flagged` rows.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("ri_lo,ri_hi,method,parameter,mare,median_are,flagged\n");
        for bin in &self.bins {
            for s in &bin.report.summaries {
                if let Some(m) = &s.metrics {
                    for (k, name) in ["r", "x", "b"].iter().enumerate() {
                        out.push_str(&format!(
                            "{},{},{},{},{:e},{:e},{}\n",
                            bin.ri_range[0], bin.ri_range[1], s.method, name, m.mare[k], m.median_are[k], bin.flagged
                        ));
                    }
                }
            }
        }
        out
    }
}

/// One Monte-Carlo batch per RI bin; starting points are drawn at a relative
/// distance uniform in the bin, with a random sign per parameter.
pub fn sensitivity_initialization(cfg: &McConfig, bins: &[[f64; 2]]) -> Result<InitSweepReport> {
    if bins.is_empty() {
        return Err(Error::Config("at least one RI bin is required".into()));
    }
    let bins = bins
        .iter()
        .map(|&range| {
            let c = McConfig {
                ri_range: Some(range),
                ..cfg.clone()
            };
            monte_carlo_run(&c).map(|report| InitBin {
                ri_range: range,
                flagged: report.divergence_flags,
                report,
            })
        })
        .collect::<Result<_>>()?;
    Ok(InitSweepReport {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        kind: "init_sweep".into(),
        bins,
    })
}

/// Mixture of the order-selection demonstration: four components with means
/// (-0.002, 0, 0.005, 0.008), standard deviation 0.001 and weights (0.1, 0.2, 0.5, 0.2).
pub fn four_component_spec() -> GmmSpec {
    GmmSpec::from_std(
        vec![0.1, 0.2, 0.5, 0.2],
        vec![-0.002, 0.0, 0.005, 0.008],
        vec![0.001; 4],
    )
    .expect("valid constant spec")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicTrial {
    pub seed: u64,
    pub best_m: usize,
    /// `(m, BIC)`, null where every EM attempt failed.
    pub scores: Vec<(usize, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicDemoReport {
    pub schema_version: String,
    pub kind: String,
    pub spec: GmmSpec,
    pub samples: usize,
    pub m_max: usize,
    pub restarts: usize,
    pub trials: Vec<BicTrial>,
    /// How often each order was selected, indexed by `m - 1`.
    pub selected_counts: Vec<usize>,
}

impl BicDemoReport {
    /// `trial,m,bic` rows.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("trial,m,bic,selected\n");
        for (t, trial) in self.trials.iter().enumerate() {
            for &(m, b) in &trial.scores {
                let b = b.map_or("nan".to_string(), |v| format!("{v:e}"));
                out.push_str(&format!("{t},{m},{b},{}\n", u8::from(m == trial.best_m)));
            }
        }
        out
    }
}

/// Draw `samples` values from `spec` per trial and select the mixture order by BIC.
pub fn bic_demo(
    spec: &GmmSpec,
    samples: usize,
    m_max: usize,
    trials: usize,
    base_seed: u64,
    em: &EmConfig,
    restarts: usize,
    exec: Execution,
) -> Result<BicDemoReport> {
    spec.validate()?;
    if samples == 0 || trials == 0 || m_max == 0 {
        return Err(Error::Config("samples, trials and m_max must be at least 1".into()));
    }
    em.validate()?;
    let trials: Vec<BicTrial> = (0..trials)
        .map(|t| {
            let seed = run_seed(base_seed, t);
            let data = gmm_sample(spec, samples, seed);
            let sel = select_order(&data, m_max, &EmConfig { seed, ..em.clone() }, restarts, exec)?;
            Ok(BicTrial {
                seed,
                best_m: sel.best_m,
                scores: sel.scores.iter().map(|s| (s.m, s.bic.is_finite().then_some(s.bic))).collect(),
            })
        })
        .collect::<Result<_>>()?;
    let mut selected_counts = vec![0; m_max];
    for t in &trials {
        selected_counts[t.best_m - 1] += 1;
    }
    Ok(BicDemoReport {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        kind: "bic_demo".into(),
        spec: spec.clone(),
        samples,
        m_max,
        restarts,
        trials,
        selected_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Method;
    use crate::tlpe::ScenarioConfig;

    fn base() -> McConfig {
        let spec = GmmSpec::from_std(vec![0.3, 0.7], vec![0.0, 0.005], vec![0.0015, 0.0015]).unwrap();
        McConfig {
            runs: 6,
            scenario: ScenarioConfig {
                s: 80,
                noise_c: spec.clone(),
                noise_d: spec,
                ..ScenarioConfig::default()
            },
            methods: vec![Method::Ls, Method::Tls],
            base_seed: 3,
            ..McConfig::default()
        }
    }

    #[test]
    fn unit_scale_reproduces_base_report() {
        let cfg = base();
        let sweep = sensitivity_noise_levels(&cfg, &[1.0, 4.0]).unwrap();
        assert_eq!(sweep.levels[0].report, monte_carlo_run(&cfg).unwrap());
        let a = sweep.levels[0].report.metrics(Method::Ls).unwrap().mare_net;
        let b = sweep.levels[1].report.metrics(Method::Ls).unwrap().mare_net;
        assert!(b > a);
        assert_eq!(sweep.table_csv().lines().count(), 1 + 2 * 2 * 3);
        assert!(sensitivity_noise_levels(&cfg, &[0.0]).is_err());
    }

    #[test]
    fn bic_demo_small() {
        let rep = bic_demo(&four_component_spec(), 3000, 5, 2, 1, &EmConfig::default(), 2, Execution::Sequential).unwrap();
        assert_eq!(rep.trials.len(), 2);
        assert_eq!(rep.selected_counts.iter().sum::<usize>(), 2);
        assert!(rep.trials.iter().all(|t| t.scores.len() == 5));
        assert_eq!(rep.table_csv().lines().count(), 1 + 2 * 5);
        assert!(bic_demo(&four_component_spec(), 0, 5, 2, 1, &EmConfig::default(), 0, Execution::Sequential).is_err());
    }

    #[test]
    fn bins_control_starting_distance_and_flags() {
        let mut cfg = base();
        cfg.methods = vec![Method::Ls];
        let sweep = sensitivity_initialization(&cfg, &[[0.0, 0.1], [0.45, 0.5]]).unwrap();
        for r in &sweep.bins[0].report.runs {
            assert!(r.ri.0.iter().all(|v| *v <= 0.1 + 1e-12));
        }
        assert_eq!(sweep.bins[0].flagged, 0);
        assert_eq!(sweep.bins[1].flagged, cfg.runs);
        // LS ignores the start, so its metrics agree across bins
        assert_eq!(
            sweep.bins[0].report.metrics(Method::Ls),
            sweep.bins[1].report.metrics(Method::Ls)
        );
        assert!(sensitivity_initialization(&cfg, &[]).is_err());
    }
}
