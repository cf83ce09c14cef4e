use std::f64::consts::PI;

use super::TimeSeries;
use crate::error::{Error, Result};

/// Unit-sum Hann taps spanning `width` sample intervals.
///
/// Odd widths use the symmetric Hann of that length; even widths use length
/// `width + 1` so the kernel has a centre tap. Zero end taps are dropped.
pub fn hann_taps(width: usize) -> Vec<f64> {
    let len = width | 1;
    let taps: Vec<f64> = (0..len)
        .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / (len - 1) as f64).cos()))
        .filter(|v| *v > 0.0)
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / sum).collect()
}

/// Centred Hann-weighted moving average with mirror padding.
pub fn hann_moving_average(x: &TimeSeries, width_samples: usize) -> Result<TimeSeries> {
    let y = hann_smooth_slice(x.samples(), width_samples)?;
    x.with_samples(y)
}

pub(crate) fn hann_smooth_slice(x: &[f64], width: usize) -> Result<Vec<f64>> {
    if width < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: width });
    }
    if width > x.len() {
        return Err(Error::InsufficientSamples { needed: width, got: x.len() });
    }
    let taps = hann_taps(width);
    let half = (taps.len() / 2) as i64;
    let n = x.len() as i64;
    let at = |i: i64| -> f64 {
        // Mirror about the end samples.
        let mut j = i;
        if n == 1 {
            return x[0];
        }
        loop {
            if j < 0 {
                j = -j;
            } else if j >= n {
                j = 2 * (n - 1) - j;
            } else {
                return x[j as usize];
            }
        }
    };
    Ok((0..n)
        .map(|i| taps.iter().enumerate().map(|(k, w)| w * at(i + k as i64 - half)).sum())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constants_preserved() {
        let x = TimeSeries::new(vec![5.0; 100], 30.0, 0.0).unwrap();
        let y = hann_moving_average(&x, 12).unwrap();
        assert!(y.samples().iter().all(|v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn impulse_gives_centred_taps() {
        let mut v = vec![0.0; 21];
        v[10] = 1.0;
        let y = hann_moving_average(&TimeSeries::new(v, 30.0, 0.0).unwrap(), 4).unwrap();
        // Direct evaluation: Hann of length 5 is (0, .5, 1, .5, 0), unit-sum -> (.25, .5, .25).
        let expect = [0.25, 0.5, 0.25];
        for (k, e) in expect.iter().enumerate() {
            assert!((y.samples()[9 + k] - e).abs() < 1e-15);
        }
        let rest: f64 = y.samples().iter().enumerate().filter(|(i, _)| !(9..=11).contains(i)).map(|(_, v)| v.abs()).sum();
        assert_eq!(rest, 0.0);
    }

    #[test]
    fn width_twelve_taps() {
        let t = hann_taps(12);
        assert_eq!(t.len(), 11);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for k in 0..t.len() {
            assert!((t[k] - t[t.len() - 1 - k]).abs() < 1e-15);
        }
    }

    #[test]
    fn smoothing_lowers_white_noise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v: Vec<f64> = (0..600).map(|_| rng.random::<f64>() - 0.5).collect();
        let x = TimeSeries::new(v, 30.0, 0.0).unwrap();
        let y = hann_moving_average(&x, 12).unwrap();
        let var = |s: &[f64]| {
            let m = s.iter().sum::<f64>() / s.len() as f64;
            s.iter().map(|a| (a - m) * (a - m)).sum::<f64>()
        };
        assert!(var(y.samples()) < var(x.samples()));
    }

    #[test]
    fn too_wide_window() {
        let x = TimeSeries::new(vec![1.0; 5], 30.0, 0.0).unwrap();
        assert!(hann_moving_average(&x, 12).is_err());
        assert!(hann_moving_average(&x, 1).is_err());
    }
}
