use image::RgbImage;
use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use super::{BBox, SuperpixelMap};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::signal::TimeSeries;

/// Decoded frames of one segment with its face rectangle.
#[derive(Debug, Clone)]
pub struct FrameStack {
    pub fps: f64,
    pub t0: f64,
    pub frames: Vec<RgbImage>,
    pub bbox: BBox,
}

impl FrameStack {
    pub fn new(fps: f64, t0: f64, frames: Vec<RgbImage>, bbox: BBox) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Config("frame stack is empty".into()))?;
        let (w, h) = first.dimensions();
        if frames.iter().any(|f| f.dimensions() != (w, h)) {
            return Err(Error::Config("frames differ in size".into()));
        }
        if !bbox.fits(w, h) {
            return Err(Error::Config(format!("bbox {bbox:?} outside {w}x{h} frame")));
        }
        if !(fps > 0.0) {
            return Err(Error::Config("fps must be positive".into()));
        }
        Ok(Self { fps, t0, frames, bbox })
    }

    pub fn width(&self) -> u32 {
        self.frames[0].width()
    }

    pub fn height(&self) -> u32 {
        self.frames[0].height()
    }
}

/// First and second colour moments of one region in one frame, with the
/// eigen-decomposition of the covariance (descending eigenvalues, basis in
/// columns, each column's first non-zero component positive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorMoments {
    pub mean: [f64; 3],
    pub cov: [[f64; 3]; 3],
    pub eigvals: [f64; 3],
    pub basis: [[f64; 3]; 3],
}

impl ColorMoments {
    pub fn from_cov(mean: [f64; 3], cov: [[f64; 3]; 3]) -> Self {
        let (eigvals, basis) = sorted_eigen(&cov);
        Self { mean, cov, eigvals, basis }
    }

    /// Upper triangle `c00 c01 c02 c11 c12 c22`.
    pub fn cov_upper(&self) -> [f64; 6] {
        let c = &self.cov;
        [c[0][0], c[0][1], c[0][2], c[1][1], c[1][2], c[2][2]]
    }

    /// Uncentred second moment `cov + mean mean^T`.
    pub fn second_moment(&self) -> [[f64; 3]; 3] {
        let mut m = self.cov;
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += self.mean[i] * self.mean[j];
            }
        }
        m
    }

    /// Eigenvector `k` (column of `basis`).
    pub fn eigvec(&self, k: usize) -> [f64; 3] {
        [self.basis[0][k], self.basis[1][k], self.basis[2][k]]
    }
}

/// Symmetric 3x3 eigen-decomposition, eigenvalues descending, canonical signs.
pub(crate) fn sorted_eigen(m: &[[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mat = Matrix3::from_fn(|i, j| m[i][j]);
    let eig = SymmetricEigen::new(mat);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut vals = [0.0; 3];
    let mut basis = [[0.0; 3]; 3];
    for (k, &i) in idx.iter().enumerate() {
        vals[k] = eig.eigenvalues[i];
        let v: Vector3<f64> = eig.eigenvectors.column(i).into();
        let v = canonical_sign(v);
        for r in 0..3 {
            basis[r][k] = v[r];
        }
    }
    (vals, basis)
}

pub(crate) fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    match v.iter().find(|c| c.abs() > 1e-12) {
        Some(c) if *c < 0.0 => -v,
        _ => v,
    }
}

/// Mean-RGB traces of one region plus optional per-frame colour moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionTraces {
    pub region_id: usize,
    pub pixels: usize,
    pub rgb: [Vec<f64>; 3],
    /// Present when traces came from pixels; required by 2SR.
    pub moments: Option<Vec<ColorMoments>>,
}

impl RegionTraces {
    pub fn len(&self) -> usize {
        self.rgb[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb[0].is_empty()
    }
}

/// All region traces of one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionTraceSet {
    pub segment_id: usize,
    pub fps: f64,
    pub t0: f64,
    pub regions: Vec<RegionTraces>,
    /// Regions dropped for an empty mask.
    pub dropped: Vec<usize>,
}

impl RegionTraceSet {
    pub fn channel(&self, region: &RegionTraces, c: usize) -> Result<TimeSeries> {
        TimeSeries::new(region.rgb[c].clone(), self.fps, self.t0)
    }

    pub fn frame_count(&self) -> usize {
        self.regions.first().map_or(0, |r| r.len())
    }
}

pub fn extract_traces(stack: &FrameStack, map: &SuperpixelMap) -> Result<RegionTraceSet> {
    extract_traces_with(stack, map, 0, Execution::Auto)
}

/// Per-frame mean RGB and colour covariance over the fixed superpixel masks.
pub fn extract_traces_with(
    stack: &FrameStack,
    map: &SuperpixelMap,
    segment_id: usize,
    exec: Execution,
) -> Result<RegionTraceSet> {
    if map.bbox != stack.bbox {
        return Err(Error::Config("superpixel map was built for a different bbox".into()));
    }
    let masks = map.masks();
    let dropped: Vec<usize> = masks.iter().enumerate().filter(|(_, m)| m.is_empty()).map(|(i, _)| i).collect();
    let live: Vec<usize> = (0..masks.len()).filter(|i| !masks[*i].is_empty()).collect();
    if live.is_empty() {
        return Err(Error::DegenerateRegion(0));
    }

    // Integer sums are exact: [sR, sG, sB, sRR, sRG, sRB, sGG, sGB, sBB].
    let per_frame: Vec<Vec<ColorMoments>> = exec.map(&stack.frames, |frame| {
        live.iter()
            .map(|&r| {
                let mut s = [0u64; 9];
                for &(x, y) in &masks[r] {
                    let p = frame.get_pixel(x, y).0;
                    let (a, b, c) = (p[0] as u64, p[1] as u64, p[2] as u64);
                    s[0] += a;
                    s[1] += b;
                    s[2] += c;
                    s[3] += a * a;
                    s[4] += a * b;
                    s[5] += a * c;
                    s[6] += b * b;
                    s[7] += b * c;
                    s[8] += c * c;
                }
                moments_from_sums(&s, masks[r].len() as u64)
            })
            .collect()
    });

    let regions = live
        .iter()
        .enumerate()
        .map(|(k, &r)| {
            let moments: Vec<ColorMoments> = per_frame.iter().map(|f| f[k]).collect();
            let rgb = [0, 1, 2].map(|c| moments.iter().map(|m| m.mean[c]).collect());
            RegionTraces { region_id: r, pixels: masks[r].len(), rgb, moments: Some(moments) }
        })
        .collect();
    Ok(RegionTraceSet { segment_id, fps: stack.fps, t0: stack.t0, regions, dropped })
}

fn moments_from_sums(s: &[u64; 9], n: u64) -> ColorMoments {
    let nf = n as f64;
    let mean = [s[0] as f64 / nf, s[1] as f64 / nf, s[2] as f64 / nf];
    // n * sum(xy) - sum(x) sum(y), exact in i128.
    let centred = |sxy: u64, sx: u64, sy: u64| -> f64 {
        let v = n as i128 * sxy as i128 - sx as i128 * sy as i128;
        v as f64 / (nf * nf)
    };
    let c00 = centred(s[3], s[0], s[0]);
    let c01 = centred(s[4], s[0], s[1]);
    let c02 = centred(s[5], s[0], s[2]);
    let c11 = centred(s[6], s[1], s[1]);
    let c12 = centred(s[7], s[1], s[2]);
    let c22 = centred(s[8], s[2], s[2]);
    ColorMoments::from_cov(mean, [[c00, c01, c02], [c01, c11, c12], [c02, c12, c22]])
}
