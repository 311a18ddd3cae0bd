//! TOML configuration with sections `[scenario]`, `[noise_c]`, `[noise_D]`,
//! `[egle]`, `[mtee]`, `[mad]` and `[mc]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{McConfig, Method, MethodSettings};
use crate::baselines::{MadConfig, MteeConfig};
use crate::egle::EgleConfig;
use crate::error::{Error, Result};
use crate::estimators::{JacobianMode, NewtonConfig};
use crate::gmm::{EmConfig, GmmSpec, InitStrategy};
use crate::par::Execution;
use crate::tlpe::{LineParameters, ScenarioConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub r: f64,
    pub x: f64,
    pub b: f64,
    pub s: usize,
    pub loading_variation: f64,
    pub base_load: f64,
    pub power_factor: f64,
    pub voltage_magnitude_spread: f64,
    pub voltage_angle_spread_deg: f64,
    pub seed: u64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let d = ScenarioConfig::default();
        ScenarioSection {
            r: d.true_params.r,
            x: d.true_params.x,
            b: d.true_params.b,
            s: d.s,
            loading_variation: d.loading_variation,
            base_load: d.base_load,
            power_factor: d.power_factor,
            voltage_magnitude_spread: d.voltage_magnitude_spread,
            voltage_angle_spread_deg: d.voltage_angle_spread_deg,
            seed: d.seed,
        }
    }
}

/// A mixture given by `weights`, `means` and exactly one of `stds` or `variances`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Option<Vec<f64>>,
    pub variances: Option<Vec<f64>>,
}

impl NoiseSection {
    pub fn to_spec(&self, section: &str) -> Result<GmmSpec> {
        let spec = match (&self.stds, &self.variances) {
            (Some(s), None) => GmmSpec::from_std(self.weights.clone(), self.means.clone(), s.clone()),
            (None, Some(v)) => GmmSpec::new(self.weights.clone(), self.means.clone(), v.clone()),
            _ => {
                return Err(Error::Config(format!(
                    "[{section}] needs exactly one of 'stds' or 'variances'"
                )))
            }
        };
        spec.map_err(|e| Error::Config(format!("[{section}] {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgleSection {
    pub m_max: usize,
    pub i_max: usize,
    pub eps0: f64,
    pub eps1: f64,
    /// Newton step tolerance.
    pub eps2: f64,
    pub k_max: usize,
    pub jacobian: JacobianMode,
    pub fd_step: f64,
    pub em_max_iter: usize,
    pub em_tol: f64,
    pub variance_floor: f64,
    pub em_init: InitStrategy,
    pub em_seed: u64,
    pub warm_start: bool,
    pub posterior_variance: bool,
    pub x0: Option<Vec<f64>>,
    pub execution: Execution,
}

impl Default for EgleSection {
    fn default() -> Self {
        let e = EgleConfig::default();
        EgleSection {
            m_max: e.m_max,
            i_max: e.i_max,
            eps0: e.eps0,
            eps1: e.eps1,
            eps2: e.newton.tol_x,
            k_max: e.newton.k_max,
            jacobian: e.newton.jacobian_mode,
            fd_step: e.newton.fd_step,
            em_max_iter: e.em.max_iter,
            em_tol: e.em.tol,
            variance_floor: e.em.variance_floor,
            em_init: e.em.init_strategy,
            em_seed: e.em.seed,
            warm_start: e.warm_start,
            posterior_variance: e.posterior_variance,
            x0: e.x0,
            execution: e.execution,
        }
    }
}

impl EgleSection {
    pub fn to_config(&self) -> EgleConfig {
        EgleConfig {
            m_max: self.m_max,
            i_max: self.i_max,
            eps0: self.eps0,
            eps1: self.eps1,
            newton: NewtonConfig {
                k_max: self.k_max,
                tol_x: self.eps2,
                jacobian_mode: self.jacobian,
                fd_step: self.fd_step,
            },
            em: EmConfig {
                max_iter: self.em_max_iter,
                tol: self.em_tol,
                variance_floor: self.variance_floor,
                init_strategy: self.em_init,
                seed: self.em_seed,
            },
            x0: self.x0.clone(),
            warm_start: self.warm_start,
            execution: self.execution,
            posterior_variance: self.posterior_variance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    pub runs: usize,
    /// Method names such as `"ls"`, `"tls"`, `"egle"`.
    pub methods: Vec<String>,
    pub init_jitter: f64,
    pub base_seed: u64,
    pub box_fraction: f64,
    pub execution: Execution,
}

impl Default for McSection {
    fn default() -> Self {
        let d = McConfig::default();
        McSection {
            runs: d.runs,
            methods: d.methods.iter().map(|m| m.name().to_string()).collect(),
            init_jitter: d.init_jitter,
            base_seed: d.base_seed,
            box_fraction: d.settings.box_fraction,
            execution: d.execution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub scenario: ScenarioSection,
    pub noise_c: Option<NoiseSection>,
    #[serde(rename = "noise_D")]
    pub noise_d: Option<NoiseSection>,
    pub egle: EgleSection,
    pub mtee: MteeConfig,
    pub mad: MadConfig,
    pub mc: McSection,
}

impl ConfigFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.mc_config()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Override the scenario seed and the Monte-Carlo base seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scenario.seed = seed;
        self.mc.base_seed = seed;
        self
    }

    pub fn scenario_config(&self) -> Result<ScenarioConfig> {
        let s = &self.scenario;
        let cfg = ScenarioConfig {
            true_params: LineParameters {
                r: s.r,
                x: s.x,
                b: s.b,
            },
            s: s.s,
            loading_variation: s.loading_variation,
            base_load: s.base_load,
            power_factor: s.power_factor,
            voltage_magnitude_spread: s.voltage_magnitude_spread,
            voltage_angle_spread_deg: s.voltage_angle_spread_deg,
            noise_c: self.noise_c.as_ref().map_or(Ok(GmmSpec::zero()), |n| n.to_spec("noise_c"))?,
            noise_d: self.noise_d.as_ref().map_or(Ok(GmmSpec::zero()), |n| n.to_spec("noise_D"))?,
            seed: s.seed,
        };
        cfg.validate().map_err(as_config)?;
        Ok(cfg)
    }

    pub fn settings(&self) -> Result<MethodSettings> {
        let settings = MethodSettings {
            egle: self.egle.to_config(),
            mtee: self.mtee.clone(),
            mad: self.mad.clone(),
            box_fraction: self.mc.box_fraction,
        };
        settings.validate().map_err(as_config)?;
        Ok(settings)
    }

    pub fn mc_config(&self) -> Result<McConfig> {
        let methods = self
            .mc
            .methods
            .iter()
            .map(|m| m.parse::<Method>())
            .collect::<Result<Vec<_>>>()?;
        let cfg = McConfig {
            runs: self.mc.runs,
            scenario: self.scenario_config()?,
            methods,
            init_jitter: self.mc.init_jitter,
            ri_range: None,
            base_seed: self.mc.base_seed,
            settings: self.settings()?,
            execution: self.mc.execution,
        };
        cfg.validate().map_err(as_config)?;
        Ok(cfg)
    }
}

/// Any validation failure of a config value is a configuration error.
fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[scenario]
s = 120
seed = 9
voltage_angle_spread_deg = 4.0

[noise_c]
weights = [0.3, 0.7]
means = [0.0, 0.005]
stds = [0.0015, 0.0015]

[noise_D]
weights = [1.0]
means = [0.0]
variances = [1e-6]

[egle]
m_max = 3
eps0 = 1e-6
eps1 = 1e-8
eps2 = 1e-11
k_max = 30
jacobian = "finite-difference"

[mtee]
max_iter = 50
kernel_sigma = 0.01

[mad]
window = 300
replacement = "interpolate"

[mc]
runs = 7
methods = ["ls", "TLS", "egle"]
"#;

    #[test]
    fn sample_file_maps_to_configs() {
        let file = ConfigFile::from_toml_str(SAMPLE).unwrap();
        let sc = file.scenario_config().unwrap();
        assert_eq!(sc.s, 120);
        assert_eq!(sc.seed, 9);
        assert_eq!(sc.noise_c.variances, vec![0.0015 * 0.0015; 2]);
        assert_eq!(sc.noise_d.variances, vec![1e-6]);
        let mc = file.mc_config().unwrap();
        assert_eq!(mc.runs, 7);
        assert_eq!(mc.methods, vec![Method::Ls, Method::Tls, Method::EgleFull]);
        let e = &mc.settings.egle;
        assert_eq!((e.m_max, e.eps1, e.newton.tol_x, e.newton.k_max), (3, 1e-8, 1e-11, 30));
        assert_eq!(e.newton.jacobian_mode, JacobianMode::FiniteDifference);
        assert_eq!(mc.settings.mtee.max_iter, 50);
        assert_eq!(mc.settings.mad.window, 300);
        let seeded = file.with_seed(42).mc_config().unwrap();
        assert_eq!((seeded.base_seed, seeded.scenario.seed), (42, 42));
    }

    #[test]
    fn empty_file_gives_defaults() {
        let file = ConfigFile::from_toml_str("").unwrap();
        let mc = file.mc_config().unwrap();
        assert_eq!(mc.scenario, ScenarioConfig::default());
        assert_eq!(mc.settings, MethodSettings::default());
    }

    #[test]
    fn bad_files_are_config_errors() {
        for text in [
            "[scenario]\ns = 0\n",
            "[scenario]\nbogus = 1\n",
            "[noise_c]\nweights = [1.0]\nmeans = [0.0]\n",
            "[noise_c]\nweights = [0.5]\nmeans = [0.0]\nstds = [0.1]\n",
            "[mc]\nmethods = [\"svd\"]\n",
            "[egle]\nm_max = 0\n",
            "[mad]\nwindow = 2\n",
            "not toml = = 1",
        ] {
            assert!(
                matches!(ConfigFile::from_toml_str(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }
}
