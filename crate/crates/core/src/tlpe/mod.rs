//! Pi-model transmission line: phasor records, the four-parameter linear
//! system, conversions between `(r, x, b)` and the admittance vector `Y`, and
//! synthetic measurement generation.

mod io;

pub use io::{read_measurements_csv, read_measurements_file, write_measurements_csv, write_measurements_file, CSV_HEADER};

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::RegressionSystem;
use crate::gmm::GmmSpec;

type C64 = Complex<f64>;

/// Series resistance, series reactance and per-end shunt susceptance, per unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineParameters {
    pub r: f64,
    pub x: f64,
    pub b: f64,
}

impl LineParameters {
    pub fn as_array(&self) -> [f64; 3] {
        [self.r, self.x, self.b]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r.is_finite() && self.x.is_finite() && self.b.is_finite()) {
            return Err(Error::Config("line parameters must be finite".into()));
        }
        if self.r < 0.0 || self.b < 0.0 {
            return Err(Error::Config("r and b must be non-negative".into()));
        }
        if self.x == 0.0 {
            return Err(Error::Config("x must be non-zero".into()));
        }
        Ok(())
    }
}

impl Default for LineParameters {
    /// A 345 kV-class line.
    fn default() -> Self {
        LineParameters {
            r: 0.00904,
            x: 0.0925,
            b: 0.159,
        }
    }
}

/// `Y1 = Re y`, `Y2 = -(b + Im y)`, `Y3 = -Re y`, `Y4 = Im y` with `y = 1 / (r + jx)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YVector(pub [f64; 4]);

impl YVector {
    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.0)
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            [a, b, c, d] => Ok(YVector([*a, *b, *c, *d])),
            _ => Err(Error::Dimension(format!("Y vector needs 4 entries, got {}", v.len()))),
        }
    }
}

impl From<&DVector<f64>> for YVector {
    fn from(v: &DVector<f64>) -> Self {
        YVector([v[0], v[1], v[2], v[3]])
    }
}

pub fn line_params_to_y(p: &LineParameters) -> Result<YVector> {
    let z2 = p.r * p.r + p.x * p.x;
    if !(z2 > 1e-300) {
        return Err(Error::DegenerateImpedance(z2));
    }
    let y = C64::new(p.r, p.x).inv();
    Ok(YVector([y.re, -(p.b + y.im), -y.re, y.im]))
}

pub fn recover_line_params(y: &YVector) -> Result<LineParameters> {
    let [y1, y2, y3, y4] = y.0;
    let den = (y1 - y3) * (y1 - y3) + (2.0 * y4) * (2.0 * y4);
    if !(den > 1e-300) {
        return Err(Error::DegenerateAdmittance(den));
    }
    Ok(LineParameters {
        r: 2.0 * (y1 - y3) / den,
        x: -4.0 * y4 / den,
        b: -(y2 + y4),
    })
}

/// Voltages and currents at both line ends for one time instant.
///
/// Currents are positive into the line at each end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasorRecord {
    pub t: f64,
    pub vp: [f64; 2],
    pub vq: [f64; 2],
    pub ip: [f64; 2],
    pub iq: [f64; 2],
}

impl PhasorRecord {
    fn c(v: [f64; 2]) -> C64 {
        C64::new(v[0], v[1])
    }

    pub fn vp(&self) -> C64 {
        Self::c(self.vp)
    }

    pub fn vq(&self) -> C64 {
        Self::c(self.vq)
    }

    pub fn ip(&self) -> C64 {
        Self::c(self.ip)
    }

    pub fn iq(&self) -> C64 {
        Self::c(self.iq)
    }

    /// `[Vp_r, Vp_i, Vq_r, Vq_i]`
    pub fn voltages(&self) -> [f64; 4] {
        [self.vp[0], self.vp[1], self.vq[0], self.vq[1]]
    }

    /// `[Ip_r, Ip_i, Iq_r, Iq_i]`
    pub fn currents(&self) -> [f64; 4] {
        [self.ip[0], self.ip[1], self.iq[0], self.iq[1]]
    }

    pub fn from_parts(t: f64, v: [f64; 4], i: [f64; 4]) -> Self {
        PhasorRecord {
            t,
            vp: [v[0], v[1]],
            vq: [v[2], v[3]],
            ip: [i[0], i[1]],
            iq: [i[2], i[3]],
        }
    }

    /// Residuals of the two pi-model current equations, largest magnitude.
    pub fn circuit_residual(&self, p: &LineParameters) -> f64 {
        let y = C64::new(p.r, p.x).inv();
        let jb = C64::new(0.0, p.b);
        let ep = self.ip() - (jb * self.vp() + (self.vp() - self.vq()) * y);
        let eq = self.iq() - (jb * self.vq() - (self.vp() - self.vq()) * y);
        ep.norm().max(eq.norm())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub true_params: LineParameters,
    /// Number of time instants.
    pub s: usize,
    /// Total fractional spread of the load current magnitude.
    pub loading_variation: f64,
    /// Nominal load current magnitude, per unit.
    pub base_load: f64,
    pub power_factor: f64,
    /// Relative spread of the sending-end voltage magnitude around 1.0.
    pub voltage_magnitude_spread: f64,
    /// Sending-end voltage angle spread in degrees around 0.
    pub voltage_angle_spread_deg: f64,
    /// Noise on each rectangular current component.
    pub noise_c: GmmSpec,
    /// Noise on each rectangular voltage component.
    #[serde(rename = "noise_D")]
    pub noise_d: GmmSpec,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            true_params: LineParameters::default(),
            s: 250,
            loading_variation: 0.40,
            base_load: 1.0,
            power_factor: 0.95,
            voltage_magnitude_spread: 0.02,
            voltage_angle_spread_deg: 5.0,
            noise_c: GmmSpec::zero(),
            noise_d: GmmSpec::zero(),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.true_params.validate()?;
        if self.s == 0 {
            return Err(Error::Config("scenario.s must be at least 1".into()));
        }
        if !(self.loading_variation >= 0.0 && self.loading_variation < 2.0) {
            return Err(Error::Config("scenario.loading_variation must lie in [0, 2)".into()));
        }
        if !(self.base_load > 0.0) {
            return Err(Error::Config("scenario.base_load must be positive".into()));
        }
        if !(self.power_factor > 0.0 && self.power_factor <= 1.0) {
            return Err(Error::Config("scenario.power_factor must lie in (0, 1]".into()));
        }
        if !(self.voltage_magnitude_spread >= 0.0 && self.voltage_magnitude_spread < 0.5) {
            return Err(Error::Config("scenario.voltage_magnitude_spread must lie in [0, 0.5)".into()));
        }
        if !(self.voltage_angle_spread_deg >= 0.0) {
            return Err(Error::Config("scenario.voltage_angle_spread_deg must be non-negative".into()));
        }
        self.noise_c.validate()?;
        self.noise_d.validate()?;
        Ok(())
    }

    /// Load current magnitudes drawn for each instant, as used by the generator.
    pub fn load_magnitudes(&self) -> Vec<f64> {
        (0..self.s)
            .map(|t| draw_instant(self, t).load_magnitude)
            .collect()
    }
}

struct InstantDraw {
    vp: C64,
    load_magnitude: f64,
}

/// Each instant uses its own ChaCha stream of the scenario seed, so records
/// do not depend on how many instants precede them.
fn draw_instant(cfg: &ScenarioConfig, t: usize) -> InstantDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(t as u64);
    let half = |rng: &mut ChaCha8Rng, w: f64| if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
    let mag = 1.0 + half(&mut rng, cfg.voltage_magnitude_spread);
    let ang = half(&mut rng, cfg.voltage_angle_spread_deg).to_radians();
    let scale = 1.0 + half(&mut rng, cfg.loading_variation / 2.0);
    InstantDraw {
        vp: C64::from_polar(mag, ang),
        load_magnitude: cfg.base_load * scale,
    }
}

/// Noise-free records that satisfy the pi-model equations by construction.
///
/// The sending voltage and the load current leaving the receiving end are
/// drawn; the receiving voltage then follows from
/// `Vq (1 + j b z) = Vp - I_L z`, with `Iq = -I_L` and `Ip = j b Vp + (Vp - Vq) y`.
pub fn simulate_measurements(cfg: &ScenarioConfig) -> Result<Vec<PhasorRecord>> {
    cfg.validate()?;
    let p = cfg.true_params;
    let z = C64::new(p.r, p.x);
    let y = z.inv();
    let jb = C64::new(0.0, p.b);
    let lag = cfg.power_factor.acos();
    Ok((0..cfg.s)
        .map(|t| {
            let draw = draw_instant(cfg, t);
            let vp = draw.vp;
            let i_load = C64::from_polar(draw.load_magnitude, vp.arg() - lag);
            let vq = (vp - i_load * z) / (C64::new(1.0, 0.0) + jb * z);
            let ip = jb * vp + (vp - vq) * y;
            let iq = -i_load;
            PhasorRecord {
                t: t as f64,
                vp: [vp.re, vp.im],
                vq: [vq.re, vq.im],
                ip: [ip.re, ip.im],
                iq: [iq.re, iq.im],
            }
        })
        .collect())
}

/// Noisy records together with the exact noise that was added.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyMeasurements {
    pub clean: Vec<PhasorRecord>,
    pub noisy: Vec<PhasorRecord>,
    /// Per record: `[Vp_r, Vp_i, Vq_r, Vq_i, Ip_r, Ip_i, Iq_r, Iq_i]` noise.
    pub noise: Vec<[f64; 8]>,
}

/// Adds an independent draw to every rectangular component: `noise_d` on
/// voltages, `noise_c` on currents.
pub fn inject_noise(records: &[PhasorRecord], noise_c: &GmmSpec, noise_d: &GmmSpec, seed: u64) -> Result<NoisyMeasurements> {
    noise_c.validate()?;
    noise_d.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = Vec::with_capacity(records.len());
    let mut noise = Vec::with_capacity(records.len());
    for rec in records {
        let mut e = [0.0; 8];
        for v in e.iter_mut().take(4) {
            *v = noise_d.draw(&mut rng);
        }
        for v in e.iter_mut().skip(4) {
            *v = noise_c.draw(&mut rng);
        }
        let v = rec.voltages();
        let i = rec.currents();
        noisy.push(PhasorRecord::from_parts(
            rec.t,
            [v[0] + e[0], v[1] + e[1], v[2] + e[2], v[3] + e[3]],
            [i[0] + e[4], i[1] + e[5], i[2] + e[6], i[3] + e[7]],
        ));
        noise.push(e);
    }
    Ok(NoisyMeasurements {
        clean: records.to_vec(),
        noisy,
        noise,
    })
}

/// Four rows per instant:
///
/// ```text
/// Ip_r = [Vp_r,  Vp_i, Vq_r,  Vq_i] Y
/// Ip_i = [Vp_i, -Vp_r, Vq_i, -Vq_r] Y
/// Iq_r = [Vq_r,  Vq_i, Vp_r,  Vp_i] Y
/// Iq_i = [Vq_i, -Vq_r, Vp_i, -Vp_r] Y
/// ```
pub fn build_system(records: &[PhasorRecord]) -> Result<RegressionSystem> {
    if records.is_empty() {
        return Err(Error::Dimension("at least one record is needed".into()));
    }
    let s = records.len();
    let mut d = DMatrix::zeros(4 * s, 4);
    let mut c = DVector::zeros(4 * s);
    for (k, rec) in records.iter().enumerate() {
        let [pr, pi, qr, qi] = rec.voltages();
        let rows = [
            [pr, pi, qr, qi],
            [pi, -pr, qi, -qr],
            [qr, qi, pr, pi],
            [qi, -qr, pi, -pr],
        ];
        let cur = rec.currents();
        for (o, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                d[(4 * k + o, j)] = *v;
            }
            c[4 * k + o] = cur[o];
        }
    }
    RegressionSystem::with_instants(d, c, 4)
}
