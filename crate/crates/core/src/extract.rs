//! rPPG pulse extraction from region colour traces: CHROM, POS, PCA (PC1) and
//! spatial subspace rotation (2SR).

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roi::{ColorMoments, RegionTraceSet, RegionTraces};
use crate::signal::{design_filter, filtfilt, mean, remove_mean, std_pop, IirFilterSpec, TimeSeries};

const MIN_SAMPLES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CHROM")]
    Chrom,
    #[serde(rename = "POS")]
    Pos,
    #[serde(rename = "PCA")]
    Pca,
    #[serde(rename = "PCA-inv")]
    PcaInverted,
    #[serde(rename = "2SR")]
    Ssr,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Chrom, Method::Pos, Method::Pca, Method::PcaInverted, Method::Ssr];

    pub fn name(self) -> &'static str {
        match self {
            Method::Chrom => "CHROM",
            Method::Pos => "POS",
            Method::Pca => "PCA",
            Method::PcaInverted => "PCA-inv",
            Method::Ssr => "2SR",
        }
    }

    /// Whether the method needs per-frame colour moments rather than mean traces.
    pub fn needs_moments(self) -> bool {
        self == Method::Ssr
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CHROM" => Ok(Method::Chrom),
            "POS" => Ok(Method::Pos),
            "PCA" => Ok(Method::Pca),
            "PCA-INV" | "PCA_INV" | "PCAINV" => Ok(Method::PcaInverted),
            "2SR" | "SSR" => Ok(Method::Ssr),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

/// One rPPG waveform for a (segment, region, method) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSignal {
    pub method: Method,
    pub region_id: usize,
    pub segment_id: usize,
    pub series: TimeSeries,
    pub inverted: bool,
    /// Set when the input carried no usable colour variation and the output is all zero.
    pub degenerate: bool,
}

impl PulseSignal {
    fn new(method: Method, series: TimeSeries) -> Self {
        let degenerate = series.samples().iter().all(|v| *v == 0.0);
        Self { method, region_id: 0, segment_id: 0, series, inverted: false, degenerate }
    }

    pub fn samples(&self) -> &[f64] {
        self.series.samples()
    }

    pub fn fs(&self) -> f64 {
        self.series.fs()
    }
}

fn check_traces(rgb: &[Vec<f64>; 3]) -> Result<usize> {
    let n = rgb[0].len();
    if rgb.iter().any(|c| c.len() != n) {
        return Err(Error::DegenerateTrace("channels differ in length".into()));
    }
    if n < MIN_SAMPLES {
        return Err(Error::InsufficientSamples { needed: MIN_SAMPLES, got: n });
    }
    Ok(n)
}

fn normalized(rgb: &[Vec<f64>; 3]) -> Result<[Vec<f64>; 3]> {
    let mut out: [Vec<f64>; 3] = Default::default();
    for (c, ch) in rgb.iter().enumerate() {
        let m = mean(ch);
        if !(m > 0.0) {
            return Err(Error::DegenerateTrace(format!("channel {c} mean is {m}")));
        }
        out[c] = ch.iter().map(|v| v / m).collect();
    }
    Ok(out)
}

/// `a - (std(a)/std(b)) * b`, or `a` when `b` is flat.
fn tune(a: &[f64], b: &[f64], sign: f64) -> Vec<f64> {
    let sb = std_pop(b);
    let alpha = if sb > 0.0 { std_pop(a) / sb } else { 0.0 };
    a.iter().zip(b).map(|(x, y)| x + sign * alpha * y).collect()
}

fn finish(method: Method, mut s: Vec<f64>, fs: f64, t0: f64) -> Result<PulseSignal> {
    remove_mean(&mut s);
    Ok(PulseSignal::new(method, TimeSeries::new(s, fs, t0)?))
}

/// Chrominance projection with 0.7-3 Hz prefiltering of both chrominance signals.
pub fn chrom(rgb: &[Vec<f64>; 3], fs: f64, t0: f64) -> Result<PulseSignal> {
    check_traces(rgb)?;
    let [r, g, b] = normalized(rgb)?;
    let x: Vec<f64> = r.iter().zip(&g).map(|(r, g)| 3.0 * r - 2.0 * g).collect();
    let y: Vec<f64> = r.iter().zip(&g).zip(&b).map(|((r, g), b)| 1.5 * r + g - 1.5 * b).collect();
    let bp = design_filter(&IirFilterSpec::physiological(), fs)?;
    let xf = filtfilt(&TimeSeries::new(x, fs, t0)?, &bp)?;
    let yf = filtfilt(&TimeSeries::new(y, fs, t0)?, &bp)?;
    finish(Method::Chrom, tune(xf.samples(), yf.samples(), -1.0), fs, t0)
}

/// Plane-orthogonal-to-skin projection over the whole segment.
pub fn pos(rgb: &[Vec<f64>; 3], fs: f64, t0: f64) -> Result<PulseSignal> {
    check_traces(rgb)?;
    let [r, g, b] = normalized(rgb)?;
    let s1: Vec<f64> = g.iter().zip(&b).map(|(g, b)| g - b).collect();
    let s2: Vec<f64> = r.iter().zip(&g).zip(&b).map(|((r, g), b)| g + b - 2.0 * r).collect();
    finish(Method::Pos, tune(&s1, &s2, 1.0), fs, t0)
}

/// First principal component of the standardized traces, signed to correlate
/// positively with G; negated when `invert`.
pub fn pca_pc1(rgb: &[Vec<f64>; 3], fs: f64, t0: f64, invert: bool) -> Result<PulseSignal> {
    let n = check_traces(rgb)?;
    let mut z: Vec<Vec<f64>> = Vec::new();
    for ch in rgb {
        let m = mean(ch);
        let s = std_pop(ch);
        if s > 1e-12 * m.abs().max(1.0) {
            z.push(ch.iter().map(|v| (v - m) / s).collect());
        }
    }
    if z.is_empty() {
        return Err(Error::DegenerateTrace("every channel has zero variance".into()));
    }
    let k = z.len();
    let cov = DMatrix::from_fn(k, k, |i, j| z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum::<f64>() / n as f64);
    let eig = SymmetricEigen::new(cov);
    let top = (0..k)
        .max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(b.cmp(&a)))
        .expect("k >= 1");
    let w: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
    let mut pc: Vec<f64> = (0..n).map(|t| (0..k).map(|c| w[c] * z[c][t]).sum()).collect();

    let g = &rgb[1];
    let gm = mean(g);
    let corr: f64 = pc.iter().zip(g).map(|(p, gv)| p * (gv - gm)).sum();
    let flip = if corr.abs() > 1e-12 {
        corr < 0.0
    } else {
        w.iter().find(|c| c.abs() > 1e-12).is_some_and(|c| *c < 0.0)
    };
    if flip ^ invert {
        pc.iter_mut().for_each(|v| *v = -*v);
    }
    let method = if invert { Method::PcaInverted } else { Method::Pca };
    let mut out = finish(method, pc, fs, t0)?;
    out.inverted = invert;
    Ok(out)
}

/// Per-frame eigen-decomposition of the uncentred colour second moment.
fn subspace(m: &ColorMoments) -> ([f64; 3], [Vector3<f64>; 3]) {
    let (vals, basis) = crate::roi::sorted_eigen(&m.second_moment());
    let col = |k: usize| Vector3::new(basis[0][k], basis[1][k], basis[2][k]);
    (vals, [col(0), col(1), col(2)])
}

/// Spatial subspace rotation with the whole segment as one stride: rotation of
/// each frame's principal skin-colour axis against the first frame's minor axes.
pub fn ssr_2sr(frames: &[ColorMoments], fs: f64, t0: f64) -> Result<PulseSignal> {
    if frames.len() < MIN_SAMPLES {
        return Err(Error::InsufficientSamples { needed: MIN_SAMPLES, got: frames.len() });
    }
    let decomposed: Vec<([f64; 3], [Vector3<f64>; 3])> = frames.iter().map(subspace).collect();
    let (ref_vals, ref_vecs) = decomposed[0];
    if ref_vals[1] <= 1e-12 || ref_vals[2] <= 1e-12 {
        return Err(Error::DegenerateSubspace { frame: 0 });
    }
    let mut sr: [Vec<f64>; 3] = Default::default();
    for (vals, vecs) in &decomposed {
        let u1 = vecs[0];
        let r2 = (vals[0] / ref_vals[1]).sqrt() * u1.dot(&ref_vecs[1]);
        let r3 = (vals[0] / ref_vals[2]).sqrt() * u1.dot(&ref_vecs[2]);
        let back = ref_vecs[1] * r2 + ref_vecs[2] * r3;
        for c in 0..3 {
            sr[c].push(back[c]);
        }
    }
    finish(Method::Ssr, tune(&sr[0], &sr[1], -1.0), fs, t0)
}

/// Run `method` on one region of a trace set.
pub fn extract_pulse(set: &RegionTraceSet, region: &RegionTraces, method: Method) -> Result<PulseSignal> {
    let mut p = match method {
        Method::Chrom => chrom(&region.rgb, set.fps, set.t0)?,
        Method::Pos => pos(&region.rgb, set.fps, set.t0)?,
        Method::Pca => pca_pc1(&region.rgb, set.fps, set.t0, false)?,
        Method::PcaInverted => pca_pc1(&region.rgb, set.fps, set.t0, true)?,
        Method::Ssr => {
            let m = region
                .moments
                .as_ref()
                .ok_or_else(|| Error::Config(format!("region {} has no colour moments for 2SR", region.region_id)))?;
            ssr_2sr(m, set.fps, set.t0)?
        }
    };
    p.region_id = region.region_id;
    p.segment_id = set.segment_id;
    Ok(p)
}
