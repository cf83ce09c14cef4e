//! Dominant-frequency estimation, adaptive harmonic bandpass, and the two
//! peak-enhancement operators: Grünwald-Letnikov fractional derivative and
//! sliding-window Lp power mean.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::beats::{detect_rppg_peaks, pulse_rate};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::signal::{design_filter, filtfilt_slice, median, psd_auto, IirFilterSpec, TimeSeries};

pub const HR_BAND: (f64, f64) = (0.7, 3.0);
pub const NOTCH_BAND: (f64, f64) = (1.9, 2.1);
pub const LP_WINDOW: usize = 4;
/// Band half-width basis when no reference ECG is available.
pub const FALLBACK_SD_HZ: f64 = 0.15;
pub const MIN_HALF_WIDTH_HZ: f64 = 0.05;
/// (harmonic multiple, SD multiple) for the fundamental and two harmonics.
pub const HARMONIC_BANDS: [(f64, f64); 3] = [(1.0, 3.0), (2.0, 4.0), (3.0, 5.0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Operator {
    #[serde(rename = "GLFOD")]
    Glfod,
    #[serde(rename = "LPNORM")]
    LpNorm,
    #[serde(rename = "NONE")]
    None,
}

impl Operator {
    pub fn name(self) -> &'static str {
        match self {
            Operator::Glfod => "GLFOD",
            Operator::LpNorm => "LPNORM",
            Operator::None => "NONE",
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One enhancement operator with its parameter (`alpha` or `p`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Enhancement {
    pub op: Operator,
    pub param: f64,
}

impl Enhancement {
    pub fn none() -> Self {
        Self { op: Operator::None, param: 0.0 }
    }

    pub fn glfod(alpha: f64) -> Self {
        Self { op: Operator::Glfod, param: alpha }
    }

    pub fn lp(p: u32) -> Self {
        Self { op: Operator::LpNorm, param: p as f64 }
    }

    pub fn validate(&self) -> Result<()> {
        match self.op {
            Operator::Glfod if !(1.0..=3.0).contains(&self.param) => {
                Err(Error::Config(format!("GLFOD order {} outside [1, 3]", self.param)))
            }
            Operator::LpNorm if !(1.0..=9.0).contains(&self.param) || self.param.fract() != 0.0 => {
                Err(Error::Config(format!("Lp exponent {} must be an integer in [1, 9]", self.param)))
            }
            _ => Ok(()),
        }
    }

    /// Apply the operator. The Lp path runs on the segment shifted to be
    /// nonnegative so that troughs do not turn into peaks under `|x|`.
    pub fn apply(&self, x: &TimeSeries) -> Result<TimeSeries> {
        self.validate()?;
        match self.op {
            Operator::None => Ok(x.clone()),
            Operator::Glfod => glfod(x, self.param),
            Operator::LpNorm => {
                let lo = x.samples().iter().copied().fold(f64::INFINITY, f64::min);
                let shifted = x.with_samples(x.samples().iter().map(|v| v - lo).collect())?;
                lp_norm_enhance(&shifted, self.param as u32, LP_WINDOW)
            }
        }
    }

    /// Short label such as `GLFOD:1.4`, `LPNORM:7` or `NONE`.
    pub fn label(&self) -> String {
        match self.op {
            Operator::None => "NONE".into(),
            Operator::LpNorm => format!("LPNORM:{}", self.param as u32),
            Operator::Glfod => format!("GLFOD:{:.1}", self.param),
        }
    }
}

impl fmt::Display for Enhancement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Enhancement {
    type Err = Error;

    /// Parses `NONE`, `GLFOD:<alpha>` or `LPNORM:<p>` (also `LP:<p>`).
    fn from_str(s: &str) -> Result<Self> {
        let (op, arg) = s.split_once(':').unwrap_or((s, ""));
        let bad = || Error::Config(format!("bad enhancement {s:?}"));
        let e = match op.trim().to_ascii_uppercase().as_str() {
            "NONE" => Enhancement::none(),
            "GLFOD" => Enhancement::glfod(arg.trim().parse().map_err(|_| bad())?),
            "LPNORM" | "LP" => Enhancement::lp(arg.trim().parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        e.validate()?;
        Ok(e)
    }
}

/// Enhancement settings for one pipeline run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnhanceConfig {
    pub enhancement: Enhancement,
    pub window: usize,
    pub sd_hz: f64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self { enhancement: Enhancement::none(), window: LP_WINDOW, sd_hz: FALLBACK_SD_HZ }
    }
}

impl EnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        self.enhancement.validate()?;
        if self.window < 2 {
            return Err(Error::Config("Lp window must be at least 2 samples".into()));
        }
        if !(self.sd_hz > 0.0) {
            return Err(Error::Config("sd_hz must be positive".into()));
        }
        Ok(())
    }
}

/// The full parameter grid of one operator.
pub fn grid_for(op: Operator) -> Vec<Enhancement> {
    match op {
        Operator::Glfod => glfod_grid(),
        Operator::LpNorm => lp_grid(),
        Operator::None => vec![Enhancement::none()],
    }
}

/// `alpha` from 1.0 to 3.0 in steps of 0.1.
pub fn glfod_grid() -> Vec<Enhancement> {
    (10..=30).map(|a| Enhancement::glfod(a as f64 / 10.0)).collect()
}

/// `p` from 1 to 9.
pub fn lp_grid() -> Vec<Enhancement> {
    (1..=9).map(Enhancement::lp).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominantFrequency {
    pub hz: f64,
    pub peak_power: f64,
    pub median_band_power: f64,
    /// Peak below 3x the median band power, within 1/T of a band edge, inside the notch,
    /// or most of the in-band power removed by the notch.
    pub low_confidence: bool,
}

/// Dominant spectral peak in 0.7-3 Hz after the 2 Hz artifact notch.
pub fn dominant_frequency(x: &TimeSeries) -> Result<DominantFrequency> {
    let notch = design_filter(&IirFilterSpec::artifact_notch(), x.fs())?;
    let y = x.with_samples(filtfilt_slice(x.samples(), &notch)?)?;
    let spec = psd_auto(&y)?;
    let before = psd_auto(x)?.band_power(HR_BAND.0, HR_BAND.1);
    let notched_away = spec.band_power(HR_BAND.0, HR_BAND.1) < 0.5 * before;
    let eps = 1e-9 * spec.df;
    let band: Vec<usize> =
        (0..spec.freqs.len()).filter(|&i| spec.freqs[i] >= HR_BAND.0 - eps && spec.freqs[i] <= HR_BAND.1 + eps).collect();
    let idx = spec.argmax_in(HR_BAND.0, HR_BAND.1).ok_or(Error::NoDominantFrequency)?;
    let peak_power = spec.power[idx];
    if !(peak_power > 0.0) {
        return Err(Error::NoDominantFrequency);
    }
    let band_powers: Vec<f64> = band.iter().map(|&i| spec.power[i]).collect();
    let median_band_power = median(&band_powers);
    let hz = spec.freqs[idx];
    // Within one resolution cell (1/T) of a band edge the peak cannot be told
    // apart from leakage of out-of-band power.
    let resolution = x.fs() / x.len() as f64;
    let at_edge = hz - spec.freqs[band[0]] < resolution || spec.freqs[*band.last().expect("band is non-empty")] - hz < resolution;
    let in_notch = hz >= NOTCH_BAND.0 - eps && hz <= NOTCH_BAND.1 + eps;
    Ok(DominantFrequency {
        hz,
        peak_power,
        median_band_power,
        low_confidence: peak_power < 3.0 * median_band_power || at_edge || in_notch || notched_away,
    })
}

/// Passbands `k*f0 +/- m*sd` for the fundamental and two harmonics, clipped to
/// `(0.05, fs/2 - 0.05)`; bands left empty by clipping are dropped.
pub fn harmonic_bands(f0: f64, sd_hz: f64, fs: f64) -> Result<Vec<(f64, f64)>> {
    if !(HR_BAND.0..=HR_BAND.1).contains(&f0) {
        return Err(Error::InvalidFundamental(f0));
    }
    let sd = if sd_hz.is_finite() { sd_hz.max(0.0) } else { 0.0 };
    let top = fs / 2.0 - 0.05;
    Ok(HARMONIC_BANDS
        .iter()
        .filter_map(|&(k, m)| {
            let half = (m * sd).max(MIN_HALF_WIDTH_HZ);
            let lo = (k * f0 - half).max(0.05);
            let hi = (k * f0 + half).min(top);
            (lo < hi).then_some((lo, hi))
        })
        .collect())
}

/// Sum of zero-phase order-4 Chebyshev II bandpass outputs over the harmonic bands.
pub fn adaptive_bandpass(x: &TimeSeries, f0: f64, sd_hz: f64) -> Result<TimeSeries> {
    let bands = harmonic_bands(f0, sd_hz, x.fs())?;
    let mut out = vec![0.0; x.len()];
    for (lo, hi) in bands {
        let coeffs = design_filter(&IirFilterSpec::chebyshev2_bandpass(4, lo, hi), x.fs())?;
        for (o, v) in out.iter_mut().zip(filtfilt_slice(x.samples(), &coeffs)?) {
            *o += v;
        }
    }
    x.with_samples(out)
}

/// Signed Grünwald-Letnikov weights `(-1)^k binom(alpha, k)` for `k < n`.
pub fn glfod_coefficients(alpha: f64, n: usize) -> Vec<f64> {
    let mut c = Vec::with_capacity(n);
    let mut prev = 1.0;
    for k in 0..n {
        if k > 0 {
            prev *= 1.0 - (alpha + 1.0) / k as f64;
        }
        c.push(prev);
    }
    c
}

/// Fractional derivative of order `alpha` with memory back to the segment start.
pub fn glfod(x: &TimeSeries, alpha: f64) -> Result<TimeSeries> {
    if !(1.0..=3.0).contains(&alpha) {
        return Err(Error::Config(format!("GLFOD order {alpha} outside [1, 3]")));
    }
    let xs = x.samples();
    let c = glfod_coefficients(alpha, xs.len());
    let scale = x.fs().powf(alpha);
    let y = (0..xs.len()).map(|t| scale * (0..=t).map(|k| c[k] * xs[t - k]).sum::<f64>()).collect();
    x.with_samples(y)
}

/// Power mean of `|x|` over a `window`-sample sliding window, shifted back by
/// `window / 2` samples; the ends are filled by edge replication.
pub fn lp_norm_enhance(x: &TimeSeries, p: u32, window: usize) -> Result<TimeSeries> {
    let n = x.len();
    if p < 1 || window < 1 {
        return Err(Error::Config("Lp exponent and window must be at least 1".into()));
    }
    if window > n {
        return Err(Error::InsufficientSamples { needed: window, got: n });
    }
    let pf = p as f64;
    let xs = x.samples();
    let raw: Vec<f64> = xs
        .windows(window)
        .map(|w| (w.iter().map(|v| v.abs().powi(p as i32)).sum::<f64>() / window as f64).powf(1.0 / pf))
        .collect();
    let shift = window / 2;
    let y = (0..n)
        .map(|m| {
            let j = m.saturating_sub(shift).min(raw.len() - 1);
            raw[j]
        })
        .collect();
    x.with_samples(y)
}

/// One pre-enhancement segment with its reference heart rate.
#[derive(Debug, Clone)]
pub struct SweepSegment {
    pub signal: TimeSeries,
    pub ref_hr_bpm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub enhancement: Enhancement,
    pub mae_bpm: f64,
    pub rmse_bpm: f64,
    pub n_segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub best: Enhancement,
}

impl SweepResult {
    pub fn best_point(&self) -> &SweepPoint {
        self.points.iter().find(|p| p.enhancement == self.best).expect("best is one of the points")
    }

    /// `operator,param,mae_bpm,rmse_bpm`, one row per grid point.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["operator", "param", "mae_bpm", "rmse_bpm"])?;
        for p in &self.points {
            out.write_record([
                p.enhancement.op.name().to_string(),
                format!("{}", p.enhancement.param),
                format!("{:.6}", p.mae_bpm),
                format!("{:.6}", p.rmse_bpm),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Pulse rate from an enhanced segment: enhance, then peak detection.
pub fn enhanced_pulse_rate(x: &TimeSeries, e: &Enhancement) -> Result<f64> {
    pulse_rate(&detect_rppg_peaks(&e.apply(x)?)?)
}

/// Evaluate every grid point over all segments and return the one with the
/// lowest MAE; ties within 1e-9 bpm go to the smaller parameter.
pub fn sweep(segments: &[SweepSegment], grid: &[Enhancement], exec: Execution) -> Result<SweepResult> {
    if segments.is_empty() || grid.is_empty() {
        return Err(Error::EmptySweep);
    }
    let evaluated: Vec<Option<SweepPoint>> = exec.map(grid, |e| {
        let errs: Vec<f64> = segments
            .iter()
            .filter_map(|s| enhanced_pulse_rate(&s.signal, e).ok().map(|pr| pr - s.ref_hr_bpm))
            .collect();
        (!errs.is_empty()).then(|| {
            let n = errs.len() as f64;
            SweepPoint {
                enhancement: *e,
                mae_bpm: errs.iter().map(|d| d.abs()).sum::<f64>() / n,
                rmse_bpm: (errs.iter().map(|d| d * d).sum::<f64>() / n).sqrt(),
                n_segments: errs.len(),
            }
        })
    });
    let points: Vec<SweepPoint> = evaluated.into_iter().flatten().collect();
    let best = points
        .iter()
        .min_by(|a, b| {
            if (a.mae_bpm - b.mae_bpm).abs() <= 1e-9 {
                a.enhancement.param.total_cmp(&b.enhancement.param)
            } else {
                a.mae_bpm.total_cmp(&b.mae_bpm)
            }
        })
        .ok_or(Error::EmptySweep)?
        .enhancement;
    Ok(SweepResult { points, best })
}
