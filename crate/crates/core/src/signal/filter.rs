//! IIR band filters designed from analog prototypes (Butterworth, Chebyshev II)
//! via frequency transformation and the prewarped bilinear transform, realised
//! as cascaded second-order sections.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::TimeSeries;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterKind {
    ButterworthNotch,
    Chebyshev2Bandpass,
    ButterworthBandpass,
}

/// Band filter design parameters. `order` is the analog prototype order; the
/// digital band filter has twice as many poles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IirFilterSpec {
    pub kind: FilterKind,
    pub order: usize,
    pub band: (f64, f64),
    /// Only used by Chebyshev II, where `band` gives the stopband edges.
    pub stopband_attenuation_db: f64,
}

impl IirFilterSpec {
    pub fn chebyshev2_bandpass(order: usize, low: f64, high: f64) -> Self {
        Self { kind: FilterKind::Chebyshev2Bandpass, order, band: (low, high), stopband_attenuation_db: 40.0 }
    }

    pub fn butterworth_bandpass(order: usize, low: f64, high: f64) -> Self {
        Self { kind: FilterKind::ButterworthBandpass, order, band: (low, high), stopband_attenuation_db: 0.0 }
    }

    pub fn butterworth_notch(order: usize, low: f64, high: f64) -> Self {
        Self { kind: FilterKind::ButterworthNotch, order, band: (low, high), stopband_attenuation_db: 0.0 }
    }

    /// 0.7-3 Hz physiological band, order 4, 40 dB.
    pub fn physiological() -> Self {
        Self::chebyshev2_bandpass(4, 0.7, 3.0)
    }

    /// Third-order notch over 1.9-2.1 Hz.
    pub fn artifact_notch() -> Self {
        Self::butterworth_notch(3, 1.9, 2.1)
    }
}

/// One biquad, `a[0] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Section {
    fn response(&self, zinv: Complex64) -> Complex64 {
        let z2 = zinv * zinv;
        (self.b[0] + self.b[1] * zinv + self.b[2] * z2) / (self.a[0] + self.a[1] * zinv + self.a[2] * z2)
    }

    fn poles(&self) -> [Complex64; 2] {
        let (a1, a2) = (self.a[1], self.a[2]);
        let disc = Complex64::new(a1 * a1 - 4.0 * a2, 0.0).sqrt();
        [(-a1 + disc) / 2.0, (-a1 - disc) / 2.0]
    }

    /// Steady-state DF-II-T state for a unit constant input, and the section gain.
    fn unit_state(&self) -> ([f64; 2], f64) {
        let g = (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2]);
        let z1 = self.b[2] - self.a[2] * g;
        let z0 = self.b[1] - self.a[1] * g + z1;
        ([z0, z1], g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCoefficients {
    pub sections: Vec<Section>,
    /// Number of digital poles.
    pub order: usize,
    pub fs: f64,
}

impl FilterCoefficients {
    pub fn response(&self, f_hz: f64) -> Complex64 {
        let zinv = Complex64::from_polar(1.0, -2.0 * PI * f_hz / self.fs);
        self.sections.iter().fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(zinv))
    }

    pub fn magnitude(&self, f_hz: f64) -> f64 {
        self.response(f_hz).norm()
    }

    pub fn max_pole_radius(&self) -> f64 {
        self.sections
            .iter()
            .flat_map(|s| s.poles())
            .map(|p| p.norm())
            .fold(0.0, f64::max)
    }

    /// Single forward pass with the given initial states.
    fn run(&self, x: &mut [f64], zi: &[[f64; 2]]) {
        for (s, z) in self.sections.iter().zip(zi) {
            let [mut z0, mut z1] = *z;
            for v in x.iter_mut() {
                let xi = *v;
                let y = s.b[0] * xi + z0;
                z0 = s.b[1] * xi - s.a[1] * y + z1;
                z1 = s.b[2] * xi - s.a[2] * y;
                *v = y;
            }
        }
    }

    /// Per-section steady-state for a unit step at the cascade input.
    fn step_states(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let (z, g) = s.unit_state();
                let out = [z[0] * scale, z[1] * scale];
                scale *= g;
                out
            })
            .collect()
    }
}

type Zpk = (Vec<Complex64>, Vec<Complex64>, f64);

fn butterworth_prototype(n: usize) -> Zpk {
    let p = (0..n)
        .map(|i| {
            let m = -(n as f64) + 1.0 + 2.0 * i as f64;
            -Complex64::from_polar(1.0, PI * m / (2.0 * n as f64))
        })
        .collect();
    (Vec::new(), p, 1.0)
}

fn chebyshev2_prototype(n: usize, rs: f64) -> Zpk {
    let nf = n as f64;
    let de = 1.0 / (10f64.powf(0.1 * rs) - 1.0).sqrt();
    let mu = (1.0 / de).asinh() / nf;
    let ms: Vec<f64> = (0..n)
        .map(|i| -nf + 1.0 + 2.0 * i as f64)
        .filter(|m| !(n % 2 == 1 && *m == 0.0))
        .collect();
    let z: Vec<Complex64> = ms
        .iter()
        .map(|m| -(Complex64::i() / (m * PI / (2.0 * nf)).sin()).conj())
        .collect();
    let p: Vec<Complex64> = (0..n)
        .map(|i| {
            let m = -nf + 1.0 + 2.0 * i as f64;
            let q = -Complex64::from_polar(1.0, PI * m / (2.0 * nf));
            1.0 / Complex64::new(mu.sinh() * q.re, mu.cosh() * q.im)
        })
        .collect();
    let num: Complex64 = p.iter().map(|v| -v).product();
    let den: Complex64 = z.iter().map(|v| -v).product();
    (z, p, (num / den).re)
}

fn lowpass_to_bandpass((z, p, k): Zpk, wo: f64, bw: f64) -> Zpk {
    let degree = p.len() - z.len();
    let split = |r: &[Complex64]| -> Vec<Complex64> {
        let scaled: Vec<Complex64> = r.iter().map(|v| v * (bw / 2.0)).collect();
        let mut out: Vec<Complex64> = scaled.iter().map(|v| v + (v * v - wo * wo).sqrt()).collect();
        out.extend(scaled.iter().map(|v| v - (v * v - wo * wo).sqrt()));
        out
    };
    let mut zb = split(&z);
    zb.extend(std::iter::repeat_n(Complex64::new(0.0, 0.0), degree));
    (zb, split(&p), k * bw.powi(degree as i32))
}

fn lowpass_to_bandstop((z, p, k): Zpk, wo: f64, bw: f64) -> Zpk {
    let degree = p.len() - z.len();
    let split = |r: &[Complex64]| -> Vec<Complex64> {
        let inv: Vec<Complex64> = r.iter().map(|v| (bw / 2.0) / v).collect();
        let mut out: Vec<Complex64> = inv.iter().map(|v| v + (v * v - wo * wo).sqrt()).collect();
        out.extend(inv.iter().map(|v| v - (v * v - wo * wo).sqrt()));
        out
    };
    let mut zb = split(&z);
    zb.extend(std::iter::repeat_n(Complex64::new(0.0, wo), degree));
    zb.extend(std::iter::repeat_n(Complex64::new(0.0, -wo), degree));
    let num: Complex64 = z.iter().map(|v| -v).product();
    let den: Complex64 = p.iter().map(|v| -v).product();
    (zb, split(&p), k * (num / den).re)
}

fn bilinear((z, p, k): Zpk, fs: f64) -> Zpk {
    let fs2 = 2.0 * fs;
    let degree = p.len() - z.len();
    let mut zz: Vec<Complex64> = z.iter().map(|v| (fs2 + v) / (fs2 - v)).collect();
    zz.extend(std::iter::repeat_n(Complex64::new(-1.0, 0.0), degree));
    let pz = p.iter().map(|v| (fs2 + v) / (fs2 - v)).collect();
    let num: Complex64 = z.iter().map(|v| fs2 - v).product();
    let den: Complex64 = p.iter().map(|v| fs2 - v).product();
    (zz, pz, k * (num / den).re)
}

/// Group roots into conjugate pairs; real roots are paired in sorted order.
fn conjugate_pairs(roots: &[Complex64]) -> Vec<(Complex64, Complex64)> {
    const TOL: f64 = 1e-10;
    let mut pairs: Vec<(Complex64, Complex64)> = roots
        .iter()
        .filter(|r| r.im > TOL)
        .map(|r| (*r, r.conj()))
        .collect();
    let mut reals: Vec<f64> = roots.iter().filter(|r| r.im.abs() <= TOL).map(|r| r.re).collect();
    reals.sort_by(|a, b| a.total_cmp(b));
    let mut it = reals.chunks(2);
    for c in &mut it {
        let a = Complex64::new(c[0], 0.0);
        let b = c.get(1).map_or(Complex64::new(f64::NAN, 0.0), |v| Complex64::new(*v, 0.0));
        pairs.push((a, b));
    }
    pairs
}

fn quadratic(pair: (Complex64, Complex64)) -> [f64; 3] {
    let (r1, r2) = pair;
    if r2.re.is_nan() {
        [1.0, -r1.re, 0.0]
    } else {
        [1.0, -(r1 + r2).re, (r1 * r2).re]
    }
}

fn zpk_to_sections((z, p, k): Zpk) -> Vec<Section> {
    let mut pole_pairs = conjugate_pairs(&p);
    let mut zero_pairs = conjugate_pairs(&z);
    // Poles nearest the unit circle get their nearest zeros first.
    pole_pairs.sort_by(|a, b| b.0.norm().total_cmp(&a.0.norm()));
    let mut sections = Vec::with_capacity(pole_pairs.len());
    for pp in pole_pairs {
        let b = if zero_pairs.is_empty() {
            [1.0, 0.0, 0.0]
        } else {
            let dist = |zp: &(Complex64, Complex64)| {
                let d2 = if zp.1.re.is_nan() { f64::INFINITY } else { (zp.1 - pp.0).norm() };
                (zp.0 - pp.0).norm().min(d2)
            };
            let (idx, _) = zero_pairs
                .iter()
                .enumerate()
                .min_by(|a, b| dist(a.1).total_cmp(&dist(b.1)))
                .expect("non-empty");
            quadratic(zero_pairs.remove(idx))
        };
        sections.push(Section { b, a: quadratic(pp) });
    }
    // Nearest-to-unit-circle section runs last.
    sections.reverse();
    if let Some(first) = sections.first_mut() {
        first.b.iter_mut().for_each(|v| *v *= k);
    }
    sections
}

/// Design a band filter for sampling rate `fs`.
pub fn design_filter(spec: &IirFilterSpec, fs: f64) -> Result<FilterCoefficients> {
    let (low, high) = spec.band;
    let nyq = fs / 2.0;
    if !(low > 0.0 && low < high && high < nyq) {
        return Err(Error::InvalidBand { low, high, fs });
    }
    if spec.order == 0 {
        return Err(Error::DesignFailure("order must be at least 1".into()));
    }
    let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
    let (w1, w2) = (warp(low), warp(high));
    let (wo, bw) = ((w1 * w2).sqrt(), w2 - w1);
    let analog = match spec.kind {
        FilterKind::ButterworthBandpass => lowpass_to_bandpass(butterworth_prototype(spec.order), wo, bw),
        FilterKind::Chebyshev2Bandpass => {
            if spec.stopband_attenuation_db <= 0.0 {
                return Err(Error::DesignFailure("stopband attenuation must be positive".into()));
            }
            lowpass_to_bandpass(chebyshev2_prototype(spec.order, spec.stopband_attenuation_db), wo, bw)
        }
        FilterKind::ButterworthNotch => lowpass_to_bandstop(butterworth_prototype(spec.order), wo, bw),
    };
    let digital = bilinear(analog, fs);
    let order = digital.1.len();
    let coeffs = FilterCoefficients { sections: zpk_to_sections(digital), order, fs };
    let r = coeffs.max_pole_radius();
    if !(r < 1.0) || coeffs.sections.iter().flat_map(|s| s.b.iter().chain(&s.a)).any(|v| !v.is_finite()) {
        return Err(Error::DesignFailure(format!("unstable design, max pole radius {r}")));
    }
    Ok(coeffs)
}

/// Forward-backward filtering with odd reflection padding of `3 * order`
/// samples and steady-state initial conditions.
pub fn filtfilt(x: &TimeSeries, coeffs: &FilterCoefficients) -> Result<TimeSeries> {
    let out = filtfilt_slice(x.samples(), coeffs)?;
    x.with_samples(out)
}

pub(crate) fn filtfilt_slice(x: &[f64], coeffs: &FilterCoefficients) -> Result<Vec<f64>> {
    let n = x.len();
    let pad = 3 * coeffs.order;
    if n <= pad {
        return Err(Error::InsufficientSamples { needed: pad, got: n });
    }
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let zi = coeffs.step_states();
    let scaled = |v: f64| zi.iter().map(|z| [z[0] * v, z[1] * v]).collect::<Vec<_>>();

    let z_fwd = scaled(ext[0]);
    coeffs.run(&mut ext, &z_fwd);
    ext.reverse();
    let z_bwd = scaled(ext[0]);
    coeffs.run(&mut ext, &z_bwd);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(f: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / fs).sin()).collect()
    }

    #[test]
    fn chebyshev2_passes_band_centre() {
        let c = design_filter(&IirFilterSpec::physiological(), 30.0).unwrap();
        assert_eq!(c.order, 8);
        assert!(c.max_pole_radius() < 1.0);
        assert!(c.magnitude(1.5) >= 0.99, "{}", c.magnitude(1.5));
        // Band edges sit at the stopband attenuation.
        assert!(c.magnitude(0.7) <= 0.0101);
        assert!(c.magnitude(3.0) <= 0.0101);
        assert!(c.magnitude(6.0) <= 0.0101);
    }

    #[test]
    fn notch_kills_two_hertz() {
        let c = design_filter(&IirFilterSpec::artifact_notch(), 30.0).unwrap();
        assert!(c.magnitude(2.0) < 0.01);
        assert!((c.magnitude(1.0) - 1.0).abs() < 1e-3);
        assert!((c.magnitude(0.0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn butterworth_bandpass_at_ecg_rate() {
        let c = design_filter(&IirFilterSpec::butterworth_bandpass(4, 0.5, 20.0), 1000.0).unwrap();
        assert!((c.magnitude((0.5f64 * 20.0).sqrt()) - 1.0).abs() < 1e-6);
        assert!((c.magnitude(20.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!(c.magnitude(200.0) < 1e-3);
    }

    #[test]
    fn band_above_nyquist_is_rejected() {
        let e = design_filter(&IirFilterSpec::chebyshev2_bandpass(4, 0.7, 20.0), 30.0).unwrap_err();
        assert!(matches!(e, Error::InvalidBand { .. }));
    }

    #[test]
    fn design_is_bit_identical() {
        let s = IirFilterSpec::physiological();
        assert_eq!(design_filter(&s, 30.0).unwrap(), design_filter(&s, 30.0).unwrap());
    }

    #[test]
    fn filtfilt_zero_in_zero_out() {
        let c = design_filter(&IirFilterSpec::physiological(), 30.0).unwrap();
        let x = TimeSeries::new(vec![0.0; 600], 30.0, 0.0).unwrap();
        assert!(filtfilt(&x, &c).unwrap().samples().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn filtfilt_has_zero_lag() {
        let c = design_filter(&IirFilterSpec::physiological(), 30.0).unwrap();
        let raw = sine(1.2, 30.0, 600);
        let x = TimeSeries::new(raw.clone(), 30.0, 0.0).unwrap();
        let y = filtfilt(&x, &c).unwrap();
        // Cross-correlation over the interior, lags -10..=10.
        let best = (-10i64..=10)
            .max_by(|&a, &b| {
                let cc = |lag: i64| -> f64 {
                    (100..500).map(|i| raw[i] * y.samples()[(i as i64 + lag) as usize]).sum()
                };
                cc(a).total_cmp(&cc(b))
            })
            .unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn notch_removes_two_hertz_sine() {
        // The notch settles over a few seconds, so the residual is measured on
        // the central 10 s of a 60 s record.
        let c = design_filter(&IirFilterSpec::artifact_notch(), 30.0).unwrap();
        let raw = sine(2.0, 30.0, 1800);
        let y = filtfilt(&TimeSeries::new(raw.clone(), 30.0, 0.0).unwrap(), &c).unwrap();
        let rms = |v: &[f64]| (v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt();
        assert!(rms(&y.samples()[750..1050]) < 1e-3 * rms(&raw));
        // Whole 20 s record: edge transients only.
        let raw = sine(2.0, 30.0, 600);
        let y = filtfilt(&TimeSeries::new(raw.clone(), 30.0, 0.0).unwrap(), &c).unwrap();
        assert!(rms(y.samples()) < 0.15 * rms(&raw));
    }

    #[test]
    fn filtfilt_needs_padding_room() {
        let c = design_filter(&IirFilterSpec::physiological(), 30.0).unwrap();
        let x = TimeSeries::new(vec![1.0; 24], 30.0, 0.0).unwrap();
        assert!(matches!(filtfilt(&x, &c), Err(Error::InsufficientSamples { .. })));
    }
}
