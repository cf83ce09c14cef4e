//! Spectral SNR metrics, the segment gate, and two-stage region selection.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::enhance::{HR_BAND, NOTCH_BAND};
use crate::error::{Error, Result};
use crate::signal::{psd_auto, PowerSpectrum, TimeSeries};

pub const DEFAULT_GATE_DB: f64 = -17.0;
pub const NARROW_HALF_WIDTH_HZ: f64 = 0.1;
pub const SELECTION_POOL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrTriple {
    /// Centred on the ECG-derived dominant frequency; absent without a reference.
    pub snr_narrow_ecg_db: Option<f64>,
    pub snr_band_db: f64,
    pub snr_narrow_rppg_db: f64,
}

/// `10 log10(signal / noise)`; `+inf` for zero noise, `-inf` for zero signal.
fn ratio_db(signal: f64, noise: f64) -> f64 {
    if signal <= 0.0 {
        f64::NEG_INFINITY
    } else if noise <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal / noise).log10()
    }
}

fn inside(f: f64, lo: f64, hi: f64, eps: f64) -> bool {
    f >= lo - eps && f <= hi + eps
}

fn narrow_from_spectrum(s: &PowerSpectrum, f_center: f64) -> Result<f64> {
    if !(HR_BAND.0..=HR_BAND.1).contains(&f_center) {
        return Err(Error::InvalidFundamental(f_center));
    }
    let eps = 1e-9 * s.df;
    let (lo, hi) = (f_center - NARROW_HALF_WIDTH_HZ, f_center + NARROW_HALF_WIDTH_HZ);
    let (mut sig, mut noise) = (0.0, 0.0);
    for (f, p) in s.freqs.iter().zip(&s.power) {
        if inside(*f, lo, hi, eps) {
            sig += p;
        } else if inside(*f, HR_BAND.0, HR_BAND.1, eps) {
            noise += p;
        }
    }
    Ok(ratio_db(sig, noise))
}

/// Power within `f_center +/- 0.1 Hz` against the rest of 0.7-3 Hz, in dB.
pub fn snr_narrow(x: &TimeSeries, f_center: f64) -> Result<f64> {
    narrow_from_spectrum(&psd_auto(x)?, f_center)
}

fn band_from_spectrum(s: &PowerSpectrum) -> f64 {
    let eps = 1e-9 * s.df;
    let (mut sig, mut noise) = (0.0, 0.0);
    for (f, p) in s.freqs.iter().zip(&s.power) {
        if *f <= 0.0 || inside(*f, NOTCH_BAND.0, NOTCH_BAND.1, eps) {
            continue;
        }
        if inside(*f, HR_BAND.0, HR_BAND.1, eps) {
            sig += p;
        } else {
            noise += p;
        }
    }
    ratio_db(sig, noise)
}

/// Power in 0.7-3 Hz against the rest of `(0, fs/2]`, both excluding 1.9-2.1 Hz, in dB.
pub fn snr_band(x: &TimeSeries) -> Result<f64> {
    Ok(band_from_spectrum(&psd_auto(x)?))
}

/// All three SNRs from one spectrum.
pub fn snr_triple(x: &TimeSeries, ecg_f0: Option<f64>, rppg_f0: f64) -> Result<SnrTriple> {
    let s = psd_auto(x)?;
    Ok(SnrTriple {
        snr_narrow_ecg_db: ecg_f0.map(|f| narrow_from_spectrum(&s, f)).transpose()?,
        snr_band_db: band_from_spectrum(&s),
        snr_narrow_rppg_db: narrow_from_spectrum(&s, rppg_f0)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub keep: bool,
    pub snr_band_db: f64,
}

/// Reject iff `snr_band < threshold_db`.
pub fn gate_with(snr_band_db: f64, threshold_db: f64) -> GateDecision {
    GateDecision { keep: !(snr_band_db < threshold_db), snr_band_db }
}

pub fn gate_segment(x: &TimeSeries) -> Result<GateDecision> {
    Ok(gate_with(snr_band(x)?, DEFAULT_GATE_DB))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub region_id: usize,
    pub mae_bpm: f64,
    pub mean_snr_db: f64,
    pub n_segments_used: usize,
}

/// Keep the four lowest-MAE regions (ties: higher SNR, then lower id) and
/// return the one with the highest mean SNR among them (ties: lower id).
pub fn select_region(scores: &[RegionScore]) -> Result<usize> {
    let mut pool: Vec<&RegionScore> = scores.iter().filter(|s| s.n_segments_used >= 1).collect();
    pool.sort_by(|a, b| {
        a.mae_bpm
            .total_cmp(&b.mae_bpm)
            .then(b.mean_snr_db.total_cmp(&a.mean_snr_db))
            .then(a.region_id.cmp(&b.region_id))
    });
    pool.truncate(SELECTION_POOL);
    pool.iter()
        .min_by(|a, b| b.mean_snr_db.total_cmp(&a.mean_snr_db).then(a.region_id.cmp(&b.region_id)))
        .map(|s| s.region_id)
        .ok_or(Error::NoRegion)
}

/// Highest mean SNR alone (ties: lower id), for runs without a reference.
pub fn select_region_by_snr(scores: &[RegionScore]) -> Result<usize> {
    scores
        .iter()
        .filter(|s| s.n_segments_used >= 1)
        .min_by(|a, b| b.mean_snr_db.total_cmp(&a.mean_snr_db).then(a.region_id.cmp(&b.region_id)))
        .map(|s| s.region_id)
        .ok_or(Error::NoRegion)
}

/// `region_id,mae_bpm,mean_snr_db,n_segments`.
pub fn write_region_scores<W: Write>(scores: &[RegionScore], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["region_id", "mae_bpm", "mean_snr_db", "n_segments"])?;
    for s in scores {
        out.write_record([
            s.region_id.to_string(),
            format!("{:.6}", s.mae_bpm),
            format!("{:.6}", s.mean_snr_db),
            s.n_segments_used.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
