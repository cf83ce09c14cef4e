//! Seeded ground-truth generators: pulsatile RGB traces, pixel-level skin
//! patches and face-like frames, and Gaussian-spike ECG with known R-peaks.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::beats::{PeakSource, PeakTrain};
use crate::error::{Error, Result};
use crate::roi::{BBox, FrameStack, RegionTraceSet, RegionTraces};
use crate::signal::TimeSeries;

/// Relative reflectance change per channel at peak blood volume, G = -1.
/// Blood absorbs, so skin darkens as the pulse arrives.
pub const PBV: [f64; 3] = [-0.33 / 0.77, -1.0, -0.53 / 0.77];
pub const MIN_IBI_S: f64 = 0.33;
/// Relative drift per channel: a warm illumination change rather than pure intensity.
pub const DRIFT_DIR: [f64; 3] = [1.0, 0.6, 0.3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IbiModel {
    Constant { ibi_s: f64 },
    /// Stationary AR(1) around `mean_s` with marginal SD `sdnn_target_s`.
    Ar1 { mean_s: f64, sdnn_target_s: f64, phi: f64 },
}

impl IbiModel {
    pub fn from_bpm(bpm: f64) -> Self {
        IbiModel::Constant { ibi_s: 60.0 / bpm }
    }

    pub fn mean_s(&self) -> f64 {
        match *self {
            IbiModel::Constant { ibi_s } => ibi_s,
            IbiModel::Ar1 { mean_s, .. } => mean_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseShape {
    Sinusoid,
    /// Fast systolic rise over 30% of the beat, slow raised-cosine fall.
    RaisedCosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub hr_bpm: f64,
    /// Defaults to a constant interval of `60 / hr_bpm` when absent.
    pub ibi_model: Option<IbiModel>,
    pub pulse_amp_frac: f64,
    pub phase_deg: [f64; 3],
    pub noise_sigma: f64,
    /// Relative illumination drift `(amplitude, Hz)` along [`DRIFT_DIR`].
    pub drift: (f64, f64),
    pub fps: f64,
    pub duration_s: f64,
    pub seed: u64,
    pub shape: PulseShape,
    pub dc: [f64; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            hr_bpm: 60.0,
            ibi_model: None,
            pulse_amp_frac: 0.01,
            phase_deg: [5.0, 0.0, -5.0],
            noise_sigma: 0.0,
            drift: (0.0, 0.0),
            fps: 30.0,
            duration_s: 20.0,
            seed: 0,
            shape: PulseShape::RaisedCosine,
            dc: [150.0, 110.0, 90.0],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.hr_bpm > 30.0 && self.hr_bpm < 180.0) {
            return Err(Error::Config(format!("hr_bpm {} outside (30, 180)", self.hr_bpm)));
        }
        if !(0.0..0.1).contains(&self.pulse_amp_frac) {
            return Err(Error::Config(format!("pulse_amp_frac {} outside [0, 0.1)", self.pulse_amp_frac)));
        }
        if !(self.fps > 0.0) || !(self.duration_s >= 0.0) || self.noise_sigma < 0.0 {
            return Err(Error::Config("fps, duration and noise must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> IbiModel {
        self.ibi_model.unwrap_or(IbiModel::from_bpm(self.hr_bpm))
    }

    pub fn n_frames(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn unit_normal() -> Normal<f64> {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Beat times covering `[start - 2, end + 2]` s, one model per consecutive
/// piece `(piece_end_s, model)`. Intervals are clipped at 0.33 s.
pub fn beat_times(pieces: &[(f64, IbiModel)], start: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, 0);
    let z = unit_normal();
    let end = pieces.last().map_or(start, |p| p.0);
    let first = pieces.first().map_or(1.0, |p| p.1.mean_s());
    let mut t = start - 2.0 - rng.random::<f64>() * first;
    let mut e: Option<f64> = None;
    let mut out = Vec::new();
    while t <= end + 2.0 {
        out.push(t);
        let model = pieces.iter().find(|p| t < p.0).or(pieces.last()).map_or(IbiModel::from_bpm(60.0), |p| p.1);
        let ibi = match model {
            IbiModel::Constant { ibi_s } => ibi_s,
            IbiModel::Ar1 { mean_s, sdnn_target_s, phi } => {
                let next = match e {
                    None => sdnn_target_s * z.sample(&mut rng),
                    Some(prev) => phi * prev + (1.0 - phi * phi).sqrt() * sdnn_target_s * z.sample(&mut rng),
                };
                e = Some(next);
                mean_s + next
            }
        };
        t += ibi.max(MIN_IBI_S);
    }
    out
}

/// Periodic pulse waveform in `[-1, 1]` peaking at each beat time.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseTrain {
    pub beats: Vec<f64>,
    pub shape: PulseShape,
}

impl PulseTrain {
    pub fn value(&self, t: f64) -> f64 {
        let k = self.beats.partition_point(|b| *b <= t);
        if k == 0 || k >= self.beats.len() {
            return 0.0;
        }
        let (b0, b1) = (self.beats[k - 1], self.beats[k]);
        let phase = (t - b0) / (b1 - b0);
        match self.shape {
            PulseShape::Sinusoid => (2.0 * std::f64::consts::PI * phase).cos(),
            PulseShape::RaisedCosine => {
                const RISE: f64 = 0.3;
                let fall = 1.0 - RISE;
                let s = if phase < fall {
                    0.5 * (1.0 + (std::f64::consts::PI * phase / fall).cos())
                } else {
                    0.5 * (1.0 - (std::f64::consts::PI * (phase - fall) / RISE).cos())
                };
                2.0 * s - 1.0
            }
        }
    }

    /// Beats in `[start, end)`.
    pub fn truth(&self, start: f64, end: f64, source: PeakSource) -> PeakTrain {
        let t: Vec<f64> = self.beats.iter().copied().filter(|b| *b >= start && *b < end).collect();
        PeakTrain::from_times(t, source).expect("beat times are increasing")
    }
}

/// Spatial layout of a synthetic face: frame size, face box, and how strongly
/// the pulse shows at each pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceLayout {
    pub width: u32,
    pub height: u32,
    pub bbox: BBox,
    /// Per-pixel static colour spread (pixel value units).
    pub texture_sigma: f64,
    /// Pulse gain ramps from `1 + gain_slope` at the top of the box to `1 - gain_slope` at the bottom.
    pub gain_slope: f64,
}

impl FaceLayout {
    /// A single uniform patch holding at least `n_pixels` pixels.
    pub fn patch(n_pixels: usize) -> Self {
        let w = (n_pixels as f64).sqrt().ceil() as u32;
        let h = (n_pixels as u32).div_ceil(w);
        Self { width: w, height: h, bbox: BBox { x: 0, y: 0, w, h }, texture_sigma: 6.0, gain_slope: 0.0 }
    }

    pub fn face(width: u32, height: u32, bbox: BBox) -> Self {
        Self { width, height, bbox, texture_sigma: 4.0, gain_slope: 0.6 }
    }

    fn gain(&self, y: u32) -> f64 {
        if self.bbox.h <= 1 {
            return 1.0;
        }
        let rel = (y.saturating_sub(self.bbox.y)) as f64 / (self.bbox.h - 1) as f64;
        1.0 + self.gain_slope * (1.0 - 2.0 * rel.clamp(0.0, 1.0))
    }
}

/// Reference ECG settings tied to a pulse recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgSpec {
    pub fs: f64,
    /// R-peak precedes the facial pulse peak by this much.
    pub ptt_s: f64,
    pub r_amp_mv: f64,
    /// Gaussian R-spike full width at half maximum.
    pub r_width_s: f64,
    pub wander_mv: f64,
    /// Additive white noise relative to the spike-train power; `None` is clean.
    pub snr_db: Option<f64>,
    /// `(beat index within the record, amplitude factor)`.
    pub ectopic: Vec<(usize, f64)>,
    pub seed: u64,
}

impl Default for EcgSpec {
    fn default() -> Self {
        Self { fs: 1000.0, ptt_s: 0.15, r_amp_mv: 1.0, r_width_s: 0.02, wander_mv: 0.1, snr_db: None, ectopic: vec![], seed: 0 }
    }
}

/// ECG samples with their R-peak truth; `samples` is empty for zero duration.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub samples: Vec<f64>,
    pub fs: f64,
    pub t0: f64,
    pub truth: PeakTrain,
}

impl EcgRecord {
    pub fn series(&self) -> Result<TimeSeries> {
        TimeSeries::new(self.samples.clone(), self.fs, self.t0)
    }
}

/// A continuous synthetic recording: one beat sequence shared by traces,
/// frames and ECG, rendered on demand over any time window.
#[derive(Debug, Clone)]
pub struct Recording {
    pub spec: SynthSpec,
    pub pulse: PulseTrain,
}

impl Recording {
    pub fn new(spec: SynthSpec) -> Result<Self> {
        let pieces = [(spec.duration_s, spec.model())];
        Self::with_pieces(spec, &pieces)
    }

    /// Piecewise IBI models, `(piece_end_s, model)` in time order.
    pub fn with_pieces(spec: SynthSpec, pieces: &[(f64, IbiModel)]) -> Result<Self> {
        spec.validate()?;
        let beats = beat_times(pieces, 0.0, spec.seed);
        Ok(Self { pulse: PulseTrain { beats, shape: spec.shape }, spec })
    }

    fn shifts(&self) -> [f64; 3] {
        let ibi = self.spec.model().mean_s();
        self.spec.phase_deg.map(|d| d / 360.0 * ibi)
    }

    /// Noise-free relative colour modulation of channel `c` at time `t`.
    fn modulation(&self, c: usize, t: f64, shifts: &[f64; 3]) -> f64 {
        let s = &self.spec;
        let drift = s.drift.0 * (2.0 * std::f64::consts::PI * s.drift.1 * t).sin();
        s.pulse_amp_frac * PBV[c] * self.pulse.value(t + shifts[c]) + DRIFT_DIR[c] * drift
    }

    /// Pulse peaks in `[start, end)`.
    pub fn truth(&self, start: f64, end: f64) -> PeakTrain {
        self.pulse.truth(start, end, PeakSource::Rppg)
    }

    /// Single-region mean-RGB traces for frames `start_frame ..`.
    pub fn traces(&self, segment_id: usize, start_frame: usize, n_frames: usize) -> Result<RegionTraceSet> {
        let s = &self.spec;
        let shifts = self.shifts();
        let mut rng = rng_for(s.seed, 1 + start_frame as u64);
        let z = unit_normal();
        let mut rgb: [Vec<f64>; 3] = Default::default();
        for i in start_frame..start_frame + n_frames {
            let t = i as f64 / s.fps;
            for c in 0..3 {
                let v = s.dc[c] * (1.0 + self.modulation(c, t, &shifts)) + s.noise_sigma * z.sample(&mut rng);
                rgb[c].push(v);
            }
        }
        Ok(RegionTraceSet {
            segment_id,
            fps: s.fps,
            t0: start_frame as f64 / s.fps,
            regions: vec![RegionTraces { region_id: 0, pixels: 1, rgb, moments: None }],
            dropped: vec![],
        })
    }

    /// Rendered 8-bit frames `start_frame ..` on `layout`.
    pub fn frames(&self, layout: &FaceLayout, start_frame: usize, n_frames: usize) -> Result<FrameStack> {
        let s = &self.spec;
        let shifts = self.shifts();
        let z = unit_normal();
        // Static texture is fixed for the whole recording.
        let mut tex_rng = rng_for(s.seed, u64::MAX);
        let texture: Vec<[f64; 3]> = (0..layout.width * layout.height)
            .map(|_| {
                let common = layout.texture_sigma * z.sample(&mut tex_rng);
                [0, 1, 2].map(|_| common + 0.5 * layout.texture_sigma * z.sample(&mut tex_rng))
            })
            .collect();
        let gains: Vec<f64> = (0..layout.height).map(|y| layout.gain(y)).collect();
        let frames = (start_frame..start_frame + n_frames)
            .map(|i| {
                let t = i as f64 / s.fps;
                let pulse = [0, 1, 2].map(|c| s.pulse_amp_frac * PBV[c] * self.pulse.value(t + shifts[c]));
                let drift = s.drift.0 * (2.0 * std::f64::consts::PI * s.drift.1 * t).sin();
                let mut rng = rng_for(s.seed, 1 << 32 | i as u64);
                RgbImage::from_fn(layout.width, layout.height, |x, y| {
                    let tx = &texture[(y * layout.width + x) as usize];
                    let g = gains[y as usize];
                    Rgb([0, 1, 2].map(|c| {
                        let v = (s.dc[c] + tx[c]) * (1.0 + g * pulse[c] + DRIFT_DIR[c] * drift) + s.noise_sigma * z.sample(&mut rng);
                        v.round().clamp(0.0, 255.0) as u8
                    }))
                })
            })
            .collect();
        FrameStack::new(s.fps, start_frame as f64 / s.fps, frames, layout.bbox)
    }

    /// ECG over `[start, end)` with R-peaks `ptt_s` before each pulse peak.
    pub fn ecg(&self, spec: &EcgSpec, start: f64, end: f64) -> EcgRecord {
        let r_times: Vec<f64> = self.pulse.beats.iter().map(|b| b - spec.ptt_s).collect();
        ecg_from_r_times(&r_times, spec, start, end)
    }
}

/// Gaussian-spike ECG over `[start, end)` for the given R-peak times.
pub fn ecg_from_r_times(r_times: &[f64], spec: &EcgSpec, start: f64, end: f64) -> EcgRecord {
    let fs = spec.fs;
    let i0 = (start * fs).round() as i64;
    let n = ((end - start) * fs).round().max(0.0) as usize;
    let sigma = spec.r_width_s / (2.0 * (2.0 * 2f64.ln()).sqrt());
    let factor = |k: usize| spec.ectopic.iter().find(|e| e.0 == k).map_or(1.0, |e| e.1);
    let mut x = vec![0.0; n];
    for (k, &r) in r_times.iter().enumerate() {
        let amp = spec.r_amp_mv * factor(k);
        let c = (r * fs).round() as i64 - i0;
        let reach = (6.0 * sigma * fs).ceil() as i64;
        for j in (c - reach).max(0)..(c + reach + 1).min(n as i64) {
            let dt = (j + i0) as f64 / fs - r;
            x[j as usize] += amp * (-dt * dt / (2.0 * sigma * sigma)).exp();
        }
    }
    if let Some(snr) = spec.snr_db {
        let power = if n > 0 { x.iter().map(|v| v * v).sum::<f64>() / n as f64 } else { 0.0 };
        let sd = (power / 10f64.powf(snr / 10.0)).sqrt();
        let mut rng = rng_for(spec.seed, 1 << 40 | i0.max(0) as u64);
        let z = unit_normal();
        x.iter_mut().for_each(|v| *v += sd * z.sample(&mut rng));
    }
    for (j, v) in x.iter_mut().enumerate() {
        let t = (j as i64 + i0) as f64 / fs;
        *v += spec.wander_mv * (2.0 * std::f64::consts::PI * 0.3 * t).sin();
    }
    let truth: Vec<f64> = r_times
        .iter()
        .copied()
        .filter(|r| *r >= start && *r < end)
        .map(|r| ((r * fs).round()) / fs)
        .collect();
    EcgRecord { samples: x, fs, t0: i0 as f64 / fs, truth: PeakTrain::from_times(truth, PeakSource::Ecg).expect("increasing") }
}

/// Traces plus peak truth for one spec.
pub fn gen_rgb(spec: &SynthSpec) -> Result<(RegionTraceSet, PeakTrain)> {
    let rec = Recording::new(spec.clone())?;
    let set = rec.traces(0, 0, spec.n_frames())?;
    Ok((set, rec.truth(0.0, spec.duration_s)))
}

/// One-region skin patch of at least `n_pixels` pixels.
pub fn gen_pixels(spec: &SynthSpec, n_pixels: usize) -> Result<(FrameStack, PeakTrain)> {
    if n_pixels < 100 {
        return Err(Error::Config(format!("need at least 100 pixels, got {n_pixels}")));
    }
    let rec = Recording::new(spec.clone())?;
    let stack = rec.frames(&FaceLayout::patch(n_pixels), 0, spec.n_frames())?;
    Ok((stack, rec.truth(0.0, spec.duration_s)))
}

/// Stand-alone ECG for an IBI model over `[0, duration_s)`.
pub fn gen_ecg(model: IbiModel, spec: &EcgSpec, duration_s: f64) -> EcgRecord {
    let beats = beat_times(&[(duration_s, model)], 0.0, spec.seed);
    ecg_from_r_times(&beats, spec, 0.0, duration_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::psd_auto;

    #[test]
    fn green_peak_at_one_hz() {
        let spec = SynthSpec { shape: PulseShape::Sinusoid, ..SynthSpec::default() };
        let (set, truth) = gen_rgb(&spec).unwrap();
        let g = set.channel(&set.regions[0], 1).unwrap();
        let s = psd_auto(&g).unwrap();
        let f = s.freqs[s.argmax_in(0.5, 5.0).unwrap()];
        assert!((f - 1.0).abs() <= 0.0074, "{f}");
        assert!((19..=21).contains(&truth.len()));
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SynthSpec { noise_sigma: 1.0, seed: 7, ..SynthSpec::default() };
        assert_eq!(gen_rgb(&spec).unwrap(), gen_rgb(&spec).unwrap());
        let other = SynthSpec { seed: 8, ..spec.clone() };
        assert_ne!(gen_rgb(&spec).unwrap().0, gen_rgb(&other).unwrap().0);
    }

    #[test]
    fn ar1_hits_sdnn_target() {
        let model = IbiModel::Ar1 { mean_s: 0.8, sdnn_target_s: 0.05, phi: 0.6 };
        let beats = beat_times(&[(600.0, model)], 0.0, 3);
        let ibi: Vec<f64> = beats.windows(2).map(|w| w[1] - w[0]).collect();
        let n = ibi.len() as f64;
        let m = ibi.iter().sum::<f64>() / n;
        let sd = (ibi.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 0.05).abs() < 0.01, "{sd}");
        assert!(ibi.iter().all(|v| *v >= MIN_IBI_S));
    }

    #[test]
    fn ecg_truth_and_empty() {
        let rec = gen_ecg(IbiModel::from_bpm(80.0), &EcgSpec::default(), 20.0);
        assert_eq!(rec.samples.len(), 20_000);
        assert!((26..=27).contains(&rec.truth.len()));
        let empty = gen_ecg(IbiModel::from_bpm(80.0), &EcgSpec::default(), 0.0);
        assert!(empty.samples.is_empty() && empty.truth.is_empty());
    }

    #[test]
    fn pixel_patch_shape() {
        let spec = SynthSpec { duration_s: 1.0, ..SynthSpec::default() };
        let (stack, _) = gen_pixels(&spec, 400).unwrap();
        assert_eq!(stack.frames.len(), 30);
        assert_eq!(stack.bbox.area(), 400);
        assert!(gen_pixels(&spec, 99).is_err());
    }
}
