//! Peak detection on enhanced rPPG and reference ECG, and the time-domain HRV
//! indices derived from the resulting peak trains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{design_filter, filtfilt_slice, hann_smooth_slice, hann_taps, IirFilterSpec, TimeSeries};

pub const MIN_PEAK_DISTANCE_S: f64 = 0.33;
pub const MIN_PROMINENCE: f64 = 0.05;
/// Hann smoothing width before rPPG peak picking (12 samples at 30 fps).
pub const RPPG_SMOOTH_S: f64 = 0.4;
pub const ECG_ENVELOPE_S: f64 = 0.25;
pub const ECG_REFRACTORY_S: f64 = 0.3;
pub const ECG_REFINE_S: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeakSource {
    #[default]
    Rppg,
    Ecg,
}

/// Ordered peak timestamps with their prominence (rPPG) or envelope height (ECG).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PeakTrain {
    pub times_s: Vec<f64>,
    pub prominences: Vec<f64>,
    pub source: PeakSource,
}

impl PeakTrain {
    pub fn new(times_s: Vec<f64>, prominences: Vec<f64>, source: PeakSource) -> Result<Self> {
        if times_s.len() != prominences.len() {
            return Err(Error::PairingError(times_s.len(), prominences.len()));
        }
        if times_s.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidSeries("peak times must be strictly increasing".into()));
        }
        Ok(Self { times_s, prominences, source })
    }

    /// Train with unit prominences.
    pub fn from_times(times_s: Vec<f64>, source: PeakSource) -> Result<Self> {
        let p = vec![1.0; times_s.len()];
        Self::new(times_s, p, source)
    }

    pub fn len(&self) -> usize {
        self.times_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times_s.is_empty()
    }

    pub fn ibis(&self) -> Vec<f64> {
        self.times_s.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Peaks with `start <= t < end`.
    pub fn window(&self, start: f64, end: f64) -> PeakTrain {
        let (times_s, prominences) = self
            .times_s
            .iter()
            .zip(&self.prominences)
            .filter(|(t, _)| **t >= start && **t < end)
            .map(|(t, p)| (*t, *p))
            .unzip();
        PeakTrain { times_s, prominences, source: self.source }
    }

    pub fn shifted(&self, dt: f64) -> PeakTrain {
        PeakTrain {
            times_s: self.times_s.iter().map(|t| t + dt).collect(),
            prominences: self.prominences.clone(),
            source: self.source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrvTriple {
    pub pr_bpm: f64,
    pub sdnn_s: f64,
    pub rmssd_s: f64,
    pub n_ibis: usize,
}

/// Local maxima of `x`, excluding the endpoints. A flat-topped maximum reports
/// its middle sample (lower middle for even plateaus).
pub(crate) fn local_maxima(x: &[f64]) -> Vec<usize> {
    let n = x.len();
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if x[i - 1] < x[i] {
            let mut j = i;
            while j + 1 < n && x[j + 1] == x[i] {
                j += 1;
            }
            if j + 1 < n && x[j + 1] < x[i] {
                out.push((i + j) / 2);
                i = j + 1;
                continue;
            }
            i = j;
        }
        i += 1;
    }
    out
}

/// Topographic prominence of each peak: height above the higher of the two
/// lowest points reached before meeting a strictly taller sample on each side.
pub(crate) fn prominences(x: &[f64], peaks: &[usize]) -> Vec<f64> {
    peaks
        .iter()
        .map(|&p| {
            let h = x[p];
            let mut left_min = h;
            for i in (0..p).rev() {
                if x[i] > h {
                    break;
                }
                left_min = left_min.min(x[i]);
            }
            let mut right_min = h;
            for &v in &x[p + 1..] {
                if v > h {
                    break;
                }
                right_min = right_min.min(v);
            }
            h - left_min.max(right_min)
        })
        .collect()
}

/// Keep peaks greedily by descending `rank`, dropping any closer than
/// `min_dist` samples to one already kept. Returns kept indices into `peaks`, ascending.
pub(crate) fn enforce_spacing(peaks: &[usize], rank: &[f64], min_dist: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..peaks.len()).collect();
    order.sort_by(|&a, &b| rank[b].total_cmp(&rank[a]).then(peaks[a].cmp(&peaks[b])));
    let mut kept: Vec<usize> = Vec::new();
    for k in order {
        let p = peaks[k] as f64;
        if kept.iter().all(|&j| (peaks[j] as f64 - p).abs() >= min_dist) {
            kept.push(k);
        }
    }
    kept.sort_unstable();
    kept
}

/// Hann smoothing, unit max-abs normalisation, prominence threshold and
/// minimum peak spacing on an enhanced rPPG segment.
pub fn detect_rppg_peaks(x: &TimeSeries) -> Result<PeakTrain> {
    let fs = x.fs();
    let width = ((RPPG_SMOOTH_S * fs).round() as usize).max(2);
    let mut y = hann_smooth_slice(x.samples(), width)?;
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(peak > 0.0) {
        return Err(Error::InsufficientPeaks { needed: 2, found: 0 });
    }
    y.iter_mut().for_each(|v| *v /= peak);

    let cand = local_maxima(&y);
    let prom = prominences(&y, &cand);
    let (cand, prom): (Vec<usize>, Vec<f64>) =
        cand.into_iter().zip(prom).filter(|(_, p)| *p >= MIN_PROMINENCE).unzip();
    // Tolerance absorbs rounding of `0.33 * fs` so a spacing of exactly 0.33 s passes.
    let kept = enforce_spacing(&cand, &prom, MIN_PEAK_DISTANCE_S * fs - 1e-9);
    if kept.len() < 2 {
        return Err(Error::InsufficientPeaks { needed: 2, found: kept.len() });
    }
    let times = kept.iter().map(|&k| x.time_at(cand[k])).collect();
    let proms = kept.iter().map(|&k| prom[k]).collect();
    let train = PeakTrain::new(times, proms, PeakSource::Rppg)?;
    debug_assert!(train.ibis().iter().all(|d| *d >= MIN_PEAK_DISTANCE_S - 1e-6));
    debug_assert!(train.prominences.iter().all(|p| *p >= MIN_PROMINENCE));
    Ok(train)
}

/// Linear-interpolated quantile of unsorted data.
pub(crate) fn quantile(x: &[f64], q: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

pub(crate) fn median(x: &[f64]) -> f64 {
    quantile(x, 0.5)
}

/// Centred Hann moving average with zeros beyond the ends. Mirroring would fold
/// a beat near an edge onto itself and push its envelope peak onto the edge.
fn envelope(x: &[f64], width: usize) -> Result<Vec<f64>> {
    if width > x.len() {
        return Err(Error::InsufficientSamples { needed: width, got: x.len() });
    }
    let taps = hann_taps(width);
    let half = taps.len() / 2;
    Ok((0..x.len())
        .map(|i| {
            taps.iter()
                .enumerate()
                .filter_map(|(k, w)| (i + k).checked_sub(half).and_then(|j| x.get(j)).map(|v| w * v))
                .sum()
        })
        .collect())
}

/// Pan-Tompkins style R-peak detector: 0.5-20 Hz Butterworth bandpass,
/// derivative, squaring, 250 ms Hann envelope, threshold at half the upper
/// quartile of candidate heights, 300 ms refractory period, and refinement to
/// the raw-signal maximum within 50 ms.
pub fn detect_ecg_rpeaks(ecg: &TimeSeries) -> Result<PeakTrain> {
    let fs = ecg.fs();
    let raw = ecg.samples();
    let bp = design_filter(&IirFilterSpec::butterworth_bandpass(4, 0.5, 20.0), fs)?;
    let filtered = filtfilt_slice(raw, &bp)?;
    let mut sq = vec![0.0; filtered.len()];
    for i in 1..filtered.len() {
        let d = (filtered[i] - filtered[i - 1]) * fs;
        sq[i] = d * d;
    }
    if sq.len() > 1 {
        sq[0] = sq[1];
    }
    let env = envelope(&sq, ((ECG_ENVELOPE_S * fs).round() as usize).max(2))?;

    let cand = local_maxima(&env);
    if cand.is_empty() {
        return Err(Error::InsufficientPeaks { needed: 1, found: 0 });
    }
    let amps: Vec<f64> = cand.iter().map(|&i| env[i]).collect();
    let thr = 0.5 * quantile(&amps, 0.75);
    let (acc, acc_amp): (Vec<usize>, Vec<f64>) =
        cand.iter().zip(&amps).filter(|(_, a)| **a >= thr && **a > 0.0).map(|(i, a)| (*i, *a)).unzip();
    if acc.is_empty() {
        return Err(Error::InsufficientPeaks { needed: 1, found: 0 });
    }
    let kept = enforce_spacing(&acc, &acc_amp, ECG_REFRACTORY_S * fs);

    let half = (ECG_REFINE_S * fs).round() as usize;
    let mut refined: Vec<(usize, f64)> = kept
        .iter()
        .map(|&k| {
            let c = acc[k];
            let lo = c.saturating_sub(half);
            let hi = (c + half).min(raw.len() - 1);
            let best = (lo..=hi).fold(lo, |b, i| if raw[i] > raw[b] { i } else { b });
            (best, acc_amp[k])
        })
        .collect();
    refined.sort_by_key(|r| r.0);
    refined.dedup_by_key(|r| r.0);
    let times = refined.iter().map(|r| ecg.time_at(r.0)).collect();
    let amps = refined.iter().map(|r| r.1).collect();
    PeakTrain::new(times, amps, PeakSource::Ecg)
}

/// 60 over the median inter-peak interval.
pub fn pulse_rate(peaks: &PeakTrain) -> Result<f64> {
    if peaks.len() < 2 {
        return Err(Error::InsufficientPeaks { needed: 2, found: peaks.len() });
    }
    Ok(60.0 / median(&peaks.ibis()))
}

fn need_two_ibis(peaks: &PeakTrain) -> Result<Vec<f64>> {
    if peaks.len() < 3 {
        return Err(Error::InsufficientPeaks { needed: 3, found: peaks.len() });
    }
    Ok(peaks.ibis())
}

/// Sample (n-1) standard deviation of the inter-beat intervals.
pub fn sdnn(peaks: &PeakTrain) -> Result<f64> {
    let ibi = need_two_ibis(peaks)?;
    let n = ibi.len() as f64;
    let m = ibi.iter().sum::<f64>() / n;
    Ok((ibi.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt())
}

pub fn rmssd(peaks: &PeakTrain) -> Result<f64> {
    let ibi = need_two_ibis(peaks)?;
    let ss: f64 = ibi.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])).sum();
    Ok((ss / (ibi.len() - 1) as f64).sqrt())
}

pub fn hrv(peaks: &PeakTrain) -> Result<HrvTriple> {
    Ok(HrvTriple { pr_bpm: pulse_rate(peaks)?, sdnn_s: sdnn(peaks)?, rmssd_s: rmssd(peaks)?, n_ibis: peaks.len() - 1 })
}
