use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{mean, TimeSeries};
use crate::error::{Error, Result};

/// Zero-padded FFT length used for 20 s segments at video rates.
pub const DEFAULT_NFFT: usize = 4096;

/// One-sided periodogram, `power[k] = |X[k]|^2` for `k in 0..=nfft/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSpectrum {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
    pub df: f64,
    pub nfft: usize,
}

impl PowerSpectrum {
    /// Sum of power over the closed band `[lo, hi]`.
    pub fn band_power(&self, lo: f64, hi: f64) -> f64 {
        let eps = 1e-9 * self.df;
        self.freqs
            .iter()
            .zip(&self.power)
            .filter(|(f, _)| **f >= lo - eps && **f <= hi + eps)
            .map(|(_, p)| p)
            .sum()
    }

    /// Index of the largest bin inside `[lo, hi]`, if any bin falls there.
    pub fn argmax_in(&self, lo: f64, hi: f64) -> Option<usize> {
        let eps = 1e-9 * self.df;
        self.freqs
            .iter()
            .enumerate()
            .filter(|(_, f)| **f >= lo - eps && **f <= hi + eps)
            .max_by(|a, b| self.power[a.0].total_cmp(&self.power[b.0]).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
    }
}

pub fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

/// Periodogram of the mean-removed series, no taper.
pub fn psd(x: &TimeSeries, nfft: usize) -> Result<PowerSpectrum> {
    psd_slice(x.samples(), x.fs(), nfft)
}

/// [`psd`] with `nfft = max(4096, next_pow2(len))`.
pub fn psd_auto(x: &TimeSeries) -> Result<PowerSpectrum> {
    psd(x, DEFAULT_NFFT.max(next_pow2(x.len())))
}

pub(crate) fn psd_slice(x: &[f64], fs: f64, nfft: usize) -> Result<PowerSpectrum> {
    if nfft < x.len() || !nfft.is_power_of_two() {
        return Err(Error::InvalidNfft { nfft, len: x.len() });
    }
    let m = mean(x);
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(v - m, 0.0)).collect();
    buf.resize(nfft, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
    let half = nfft / 2;
    let df = fs / nfft as f64;
    Ok(PowerSpectrum {
        freqs: (0..=half).map(|k| k as f64 * df).collect(),
        power: buf[..=half].iter().map(|c| c.norm_sqr()).collect(),
        df,
        nfft,
    })
}
