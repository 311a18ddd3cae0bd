//! Metrics, single-shot estimation by method name, Monte-Carlo runs and
//! sensitivity sweeps.

mod config;
mod mc;
mod sweep;

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::baselines::{denoise_then_ls, mtee_estimate, MadConfig, MteeConfig};
use crate::egle::{egle_dependent, egle_full, EgleConfig, EstimationReport};
use crate::error::{Error, Result};
use crate::estimators::{constrained_ls, constrained_tls, ls_estimate, tls_estimate, BoxBounds, NegatedPair};
use crate::tlpe::{build_system, recover_line_params, LineParameters, PhasorRecord, YVector};

pub use config::{ConfigFile, EgleSection, McSection, NoiseSection, ScenarioSection};
pub use mc::{monte_carlo_run, paired_wins, run_seed, McConfig, McReport, MethodRun, MethodSummary, RunRecord};
pub use sweep::{
    bic_demo, four_component_spec, sensitivity_initialization, sensitivity_noise_levels, BicDemoReport, BicTrial,
    InitBin, InitSweepReport, NoiseLevel, NoiseSweepReport, DIVERGENCE_RI,
};

/// Version tag carried by every JSON report.
pub const REPORT_SCHEMA_VERSION: &str = "1.0";

/// `|x_est - x_true| / |x_true|`.
pub fn are(x_est: f64, x_true: f64) -> Result<f64> {
    if x_true == 0.0 {
        return Err(Error::ZeroTruth);
    }
    Ok((x_est - x_true).abs() / x_true.abs())
}

/// ARE of `(r, x, b)`.
pub fn are_line(est: &LineParameters, truth: &LineParameters) -> Result<[f64; 3]> {
    Ok([are(est.r, truth.r)?, are(est.x, truth.x)?, are(est.b, truth.b)?])
}

/// `|x0 - x*| / |x*|` per line parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiIndex(pub [f64; 3]);

impl RiIndex {
    pub fn new(x0: &LineParameters, truth: &LineParameters) -> Result<Self> {
        are_line(x0, truth).map(RiIndex)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().cloned().fold(0.0, f64::max)
    }
}

/// Mean and sample standard deviation of ARE per parameter plus the net
/// figures, where the net ARE of a run is the sum of its three AREs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mare: [f64; 3],
    pub sdare: [f64; 3],
    pub median_are: [f64; 3],
    pub mare_net: f64,
    pub sdare_net: f64,
    pub median_are_net: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Median with the two middle values averaged.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl Metrics {
    /// `None` for an empty run set.
    pub fn from_runs(ares: &[[f64; 3]]) -> Option<Self> {
        if ares.is_empty() {
            return None;
        }
        let mut mare = [0.0; 3];
        let mut sdare = [0.0; 3];
        let mut median_are = [0.0; 3];
        for k in 0..3 {
            let col: Vec<f64> = ares.iter().map(|a| a[k]).collect();
            (mare[k], sdare[k]) = mean_sd(&col);
            median_are[k] = median(&col);
        }
        let net: Vec<f64> = ares.iter().map(|a| a.iter().sum()).collect();
        let (mare_net, sdare_net) = mean_sd(&net);
        Some(Metrics {
            mare,
            sdare,
            median_are,
            mare_net,
            sdare_net,
            median_are_net: median(&net),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "LS")]
    Ls,
    #[serde(rename = "TLS")]
    Tls,
    #[serde(rename = "CLS")]
    Cls,
    #[serde(rename = "CTLS")]
    Ctls,
    #[serde(rename = "EGLE_DEP")]
    EgleDep,
    #[serde(rename = "EGLE_FULL")]
    EgleFull,
    #[serde(rename = "MTEE")]
    Mtee,
    #[serde(rename = "DENOISE_LS")]
    DenoiseLs,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Ls,
        Method::Tls,
        Method::Cls,
        Method::Ctls,
        Method::EgleDep,
        Method::EgleFull,
        Method::Mtee,
        Method::DenoiseLs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ls => "LS",
            Method::Tls => "TLS",
            Method::Cls => "CLS",
            Method::Ctls => "CTLS",
            Method::EgleDep => "EGLE_DEP",
            Method::EgleFull => "EGLE_FULL",
            Method::Mtee => "MTEE",
            Method::DenoiseLs => "DENOISE_LS",
        }
    }

    /// Parse a comma-separated list such as `ls,tls,egle`.
    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m: Method = part.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("empty method list".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    /// Case-insensitive; `egle` means the full variant, `-` and `_` are interchangeable.
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase().replace('-', "_");
        let m = match key.as_str() {
            "LS" => Method::Ls,
            "TLS" => Method::Tls,
            "CLS" => Method::Cls,
            "CTLS" => Method::Ctls,
            "EGLE_DEP" | "EGLE_DEPENDENT" => Method::EgleDep,
            "EGLE" | "EGLE_FULL" => Method::EgleFull,
            "MTEE" => Method::Mtee,
            "DENOISE_LS" | "MAD_LS" => Method::DenoiseLs,
            _ => return Err(Error::Config(format!("unknown method '{s}'"))),
        };
        Ok(m)
    }
}

/// Per-method settings shared by single estimates and Monte-Carlo runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodSettings {
    pub egle: EgleConfig,
    pub mtee: MteeConfig,
    pub mad: MadConfig,
    /// Half-width of the constrained variants' box as a fraction of `|x0|`.
    pub box_fraction: f64,
}

impl Default for MethodSettings {
    fn default() -> Self {
        MethodSettings {
            egle: EgleConfig::default(),
            mtee: MteeConfig::default(),
            mad: MadConfig::default(),
            box_fraction: 0.3,
        }
    }
}

impl MethodSettings {
    pub fn validate(&self) -> Result<()> {
        self.egle.validate()?;
        self.mtee.validate()?;
        self.mad.validate()?;
        if !(self.box_fraction > 0.0 && self.box_fraction.is_finite()) {
            return Err(Error::Config("box_fraction must be positive".into()));
        }
        Ok(())
    }
}

/// Everything one method produced on one data set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodEstimate {
    pub method: Method,
    pub y: [f64; 4],
    pub line: LineParameters,
    pub box_active: Option<bool>,
    pub egle: Option<EstimationReport>,
    pub mtee_iterations: Option<usize>,
    pub mtee_entropy_trace: Option<Vec<f64>>,
    pub converged: Option<bool>,
}

/// Run one method on a set of (noisy) records. `x0` is the starting point in
/// admittance coordinates, used by the iterative methods and to centre the
/// constrained variants' box.
pub fn estimate(method: Method, records: &[PhasorRecord], x0: &YVector, settings: &MethodSettings) -> Result<MethodEstimate> {
    let sys = build_system(records)?;
    let x0v = x0.to_dvector();
    let mut out = MethodEstimate {
        method,
        y: [0.0; 4],
        line: LineParameters::default(),
        box_active: None,
        egle: None,
        mtee_iterations: None,
        mtee_entropy_trace: None,
        converged: None,
    };
    let y: DVector<f64> = match method {
        Method::Ls => ls_estimate(&sys)?,
        Method::Tls => tls_estimate(&sys)?,
        Method::Cls | Method::Ctls => {
            let bounds = BoxBounds::around(&x0v, settings.box_fraction);
            let est = if method == Method::Cls {
                constrained_ls(&sys, NegatedPair::LINE_ADMITTANCE, Some(&bounds))?
            } else {
                constrained_tls(&sys, NegatedPair::LINE_ADMITTANCE, Some(&bounds))?
            };
            out.box_active = Some(est.box_active);
            est.x
        }
        Method::EgleDep | Method::EgleFull => {
            let cfg = EgleConfig {
                x0: Some(x0.0.to_vec()),
                ..settings.egle.clone()
            };
            let rep = if method == Method::EgleDep {
                egle_dependent(&sys, &cfg)?
            } else {
                egle_full(&sys, &cfg)?
            };
            out.converged = Some(rep.converged);
            let y = DVector::from_vec(rep.x_hat.clone());
            out.egle = Some(rep);
            y
        }
        Method::Mtee => {
            let res = mtee_estimate(&sys, &x0v, &settings.mtee)?;
            out.converged = Some(res.converged);
            out.mtee_iterations = Some(res.iterations);
            out.mtee_entropy_trace = Some(res.entropy_trace);
            DVector::from_vec(res.x)
        }
        Method::DenoiseLs => denoise_then_ls(records, &settings.mad)?,
    };
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Infeasible(format!("{method} produced a non-finite estimate")));
    }
    let yv = YVector::from(&y);
    out.line = recover_line_params(&yv)?;
    out.y = yv.0;
    Ok(out)
}
