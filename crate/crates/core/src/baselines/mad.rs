//! Moving-window median absolute deviation filter and the
//! denoise-then-least-squares pipeline.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::ls_estimate;
use crate::tlpe::{build_system, PhasorRecord};

const MAD_CONSISTENCY: f64 = 1.4826;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Replacement {
    /// Window median of the original series.
    #[default]
    Median,
    /// Linear interpolation between the nearest unflagged neighbours.
    Interpolate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MadConfig {
    pub window: usize,
    pub threshold: f64,
    pub replacement: Replacement,
}

impl Default for MadConfig {
    fn default() -> Self {
        MadConfig {
            window: 600,
            threshold: 3.0,
            replacement: Replacement::Median,
        }
    }
}

impl MadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 {
            return Err(Error::Config("mad.window must be at least 3".into()));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::Config("mad.threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MadOutcome {
    pub cleaned: Vec<f64>,
    pub flags: Vec<bool>,
}

impl MadOutcome {
    pub fn flagged(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

fn median(buf: &mut [f64]) -> f64 {
    buf.sort_by(f64::total_cmp);
    let n = buf.len();
    if n % 2 == 1 {
        buf[n / 2]
    } else {
        0.5 * (buf[n / 2 - 1] + buf[n / 2])
    }
}

const MAX_PASSES: usize = 100;

/// Flag samples further than `threshold` scaled MADs from their centred
/// window median and replace them.
///
/// The window covers `window / 2` samples either side, truncated at the edges.
/// A series shorter than the window uses the whole series for every sample.
/// Passes repeat on the cleaned series until one flags nothing, so the filter
/// is a fixed point of itself; `flags` is the union over passes.
pub fn mad_denoise(series: &[f64], cfg: &MadConfig) -> Result<MadOutcome> {
    cfg.validate()?;
    if let Some(index) = series.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidSample {
            index,
            value: series[index],
        });
    }
    let mut out = MadOutcome {
        cleaned: series.to_vec(),
        flags: vec![false; series.len()],
    };
    for _ in 0..MAX_PASSES {
        let pass = single_pass(&out.cleaned, cfg);
        if pass.flagged() == 0 {
            break;
        }
        for (f, p) in out.flags.iter_mut().zip(&pass.flags) {
            *f |= *p;
        }
        out.cleaned = pass.cleaned;
    }
    Ok(out)
}

fn single_pass(series: &[f64], cfg: &MadConfig) -> MadOutcome {
    let n = series.len();
    let half = cfg.window / 2;
    let mut flags = vec![false; n];
    let mut medians = vec![0.0; n];
    let mut buf = Vec::with_capacity(cfg.window + 1);
    let mut dev = Vec::with_capacity(cfg.window + 1);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        buf.clear();
        buf.extend_from_slice(&series[lo..hi]);
        let med = median(&mut buf);
        dev.clear();
        dev.extend(series[lo..hi].iter().map(|v| (v - med).abs()));
        let mad = MAD_CONSISTENCY * median(&mut dev);
        medians[i] = med;
        flags[i] = (series[i] - med).abs() > cfg.threshold * mad;
    }
    let mut cleaned = series.to_vec();
    match cfg.replacement {
        Replacement::Median => {
            for i in 0..n {
                if flags[i] {
                    cleaned[i] = medians[i];
                }
            }
        }
        Replacement::Interpolate => {
            let kept: Vec<usize> = (0..n).filter(|&i| !flags[i]).collect();
            if kept.is_empty() {
                cleaned.copy_from_slice(&medians);
            } else {
                for i in 0..n {
                    if !flags[i] {
                        continue;
                    }
                    let next = kept.partition_point(|&k| k < i);
                    cleaned[i] = match (next.checked_sub(1).map(|k| kept[k]), kept.get(next)) {
                        (Some(a), Some(&b)) => {
                            let t = (i - a) as f64 / (b - a) as f64;
                            series[a] + t * (series[b] - series[a])
                        }
                        (Some(a), None) => series[a],
                        (None, Some(&b)) => series[b],
                        (None, None) => unreachable!(),
                    };
                }
            }
        }
    }
    MadOutcome { cleaned, flags }
}

/// Filter each of the eight rectangular channels and run least squares on the
/// cleaned records.
pub fn denoise_then_ls(records: &[PhasorRecord], cfg: &MadConfig) -> Result<DVector<f64>> {
    let channels: Vec<Vec<f64>> = (0..8)
        .map(|k| {
            let series: Vec<f64> = records
                .iter()
                .map(|r| if k < 4 { r.voltages()[k] } else { r.currents()[k - 4] })
                .collect();
            mad_denoise(&series, cfg).map(|o| o.cleaned)
        })
        .collect::<Result<_>>()?;
    let cleaned: Vec<PhasorRecord> = records
        .iter()
        .enumerate()
        .map(|(t, r)| {
            let v = [channels[0][t], channels[1][t], channels[2][t], channels[3][t]];
            let i = [channels[4][t], channels[5][t], channels[6][t], channels[7][t]];
            PhasorRecord::from_parts(r.t, v, i)
        })
        .collect();
    ls_estimate(&build_system(&cleaned)?)
}
