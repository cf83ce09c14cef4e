//! Sampled-signal primitives: uniform time series, IIR design and zero-phase
//! filtering, FFT power spectra and Hann-weighted smoothing.

mod filter;
mod smooth;
mod spectrum;

pub use filter::{design_filter, filtfilt, FilterCoefficients, FilterKind, IirFilterSpec, Section};
pub use smooth::{hann_moving_average, hann_taps};
pub use spectrum::{next_pow2, psd, psd_auto, PowerSpectrum, DEFAULT_NFFT};
pub(crate) use filter::filtfilt_slice;
pub(crate) use smooth::hann_smooth_slice;


use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniformly sampled real signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    samples: Vec<f64>,
    fs: f64,
    t0: f64,
}

impl TimeSeries {
    pub fn new(samples: Vec<f64>, fs: f64, t0: f64) -> Result<Self> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::InvalidSeries(format!("sampling rate {fs} must be positive")));
        }
        if samples.is_empty() {
            return Err(Error::InvalidSeries("empty series".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidSeries(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, fs, t0 })
    }

    /// Same rate and start time, new samples.
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, self.fs, self.t0)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    /// Time stamp of sample `i`.
    pub fn time_at(&self, i: usize) -> f64 {
        self.t0 + i as f64 / self.fs
    }

    /// Sub-series covering `[start_s, start_s + len_s)` in absolute time.
    pub fn slice_time(&self, start_s: f64, len_s: f64) -> Result<Self> {
        let i0 = ((start_s - self.t0) * self.fs).round().max(0.0) as usize;
        let n = (len_s * self.fs).round() as usize;
        let i1 = (i0 + n).min(self.samples.len());
        if i0 >= i1 {
            return Err(Error::InsufficientSamples { needed: n, got: 0 });
        }
        Self::new(self.samples[i0..i1].to_vec(), self.fs, self.time_at(i0))
    }

    pub fn mean(&self) -> f64 {
        mean(&self.samples)
    }
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation.
pub(crate) fn std_pop(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

pub(crate) fn median(x: &[f64]) -> f64 {
    crate::beats::median(x)
}

pub(crate) fn remove_mean(x: &mut [f64]) {
    let m = mean(x);
    x.iter_mut().for_each(|v| *v -= m);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_series() {
        assert!(TimeSeries::new(vec![], 30.0, 0.0).is_err());
        assert!(TimeSeries::new(vec![1.0], 0.0, 0.0).is_err());
        assert!(TimeSeries::new(vec![1.0, f64::NAN], 30.0, 0.0).is_err());
    }

    #[test]
    fn slice_time_aligns_to_samples() {
        let x = TimeSeries::new((0..100).map(|i| i as f64).collect(), 10.0, 2.0).unwrap();
        let s = x.slice_time(3.0, 2.0).unwrap();
        assert_eq!(s.len(), 20);
        assert_eq!(s.samples()[0], 10.0);
        assert!((s.t0() - 3.0).abs() < 1e-12);
    }
}
