//! File formats: PPM frame directories with a JSON manifest, trace CSV with an
//! eigen-data JSON sidecar, and ECG CSV.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roi::{BBox, ColorMoments, FrameStack, RegionTraceSet, RegionTraces};
use crate::signal::TimeSeries;

mod bbox_array {
    use super::BBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &BBox, s: S) -> Result<S::Ok, S::Error> {
        [b.x, b.y, b.w, b.h].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BBox, D::Error> {
        let [x, y, w, h] = <[u32; 4]>::deserialize(d)?;
        Ok(BBox { x, y, w, h })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSegment {
    pub start_frame: usize,
    #[serde(with = "bbox_array")]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fps: f64,
    pub width: u32,
    pub height: u32,
    pub segments: Vec<ManifestSegment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recording_id: Option<String>,
    /// Sampling rate for a single-column ECG file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ecg_fs: Option<f64>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0) {
            return Err(Error::Config("manifest fps must be positive".into()));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if !s.bbox.fits(self.width, self.height) {
                return Err(Error::Config(format!("segment {i} bbox outside the frame")));
            }
        }
        Ok(())
    }
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{index:06}.ppm"))
}

/// Binary (P6) PPM.
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    PnmEncoder::new(w)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let img = image::ImageReader::with_format(BufReader::new(File::open(path)?), image::ImageFormat::Pnm).decode()?;
    Ok(img.to_rgb8())
}

/// Frames `start .. start + n` of a frame directory.
pub fn read_frames(dir: &Path, start: usize, n: usize, fps: f64, bbox: BBox) -> Result<FrameStack> {
    let frames = (start..start + n).map(|i| read_ppm(&frame_path(dir, i))).collect::<Result<Vec<_>>>()?;
    FrameStack::new(fps, start as f64 / fps, frames, bbox)
}

/// Write a stack's frames as `frame_%06d.ppm`, numbered from `first_index`.
pub fn write_frames(dir: &Path, first_index: usize, stack: &FrameStack) -> Result<()> {
    for (k, f) in stack.frames.iter().enumerate() {
        write_ppm(&frame_path(dir, first_index + k), f)?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    segment_id: usize,
    region_id: usize,
    frame_idx: usize,
    t_s: f64,
    r_mean: f64,
    g_mean: f64,
    b_mean: f64,
}

/// `segment_id,region_id,frame_idx,t_s,r_mean,g_mean,b_mean`, with absolute frame indices.
pub fn write_traces_csv<W: Write>(sets: &[RegionTraceSet], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for set in sets {
        let first = (set.t0 * set.fps).round() as usize;
        for r in &set.regions {
            for i in 0..r.len() {
                out.serialize(TraceRow {
                    segment_id: set.segment_id,
                    region_id: r.region_id,
                    frame_idx: first + i,
                    t_s: (first + i) as f64 / set.fps,
                    r_mean: r.rgb[0][i],
                    g_mean: r.rgb[1][i],
                    b_mean: r.rgb[2][i],
                })?;
            }
        }
    }
    if sets.iter().all(|s| s.regions.is_empty()) {
        out.write_record(["segment_id", "region_id", "frame_idx", "t_s", "r_mean", "g_mean", "b_mean"])?;
    }
    out.flush()?;
    Ok(())
}

/// Group trace rows back into per-segment sets ordered by segment and region.
pub fn read_traces_csv<R: Read>(r: R, fps: f64) -> Result<Vec<RegionTraceSet>> {
    if !(fps > 0.0) {
        return Err(Error::Config("fps must be positive".into()));
    }
    let mut rdr = csv::Reader::from_reader(r);
    let mut groups: BTreeMap<usize, BTreeMap<usize, Vec<TraceRow>>> = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: TraceRow = row?;
        groups.entry(row.segment_id).or_default().entry(row.region_id).or_default().push(row);
    }
    groups
        .into_iter()
        .map(|(segment_id, regions)| {
            let mut first_frame = None;
            let mut out = Vec::with_capacity(regions.len());
            for (region_id, mut rows) in regions {
                rows.sort_by_key(|r| r.frame_idx);
                let f0 = rows[0].frame_idx;
                if rows.iter().enumerate().any(|(k, r)| r.frame_idx != f0 + k) {
                    return Err(Error::Parse(format!("segment {segment_id} region {region_id}: frame indices not contiguous")));
                }
                if *first_frame.get_or_insert(f0) != f0 {
                    return Err(Error::Parse(format!("segment {segment_id}: regions start at different frames")));
                }
                let rgb = [
                    rows.iter().map(|r| r.r_mean).collect(),
                    rows.iter().map(|r| r.g_mean).collect(),
                    rows.iter().map(|r| r.b_mean).collect(),
                ];
                out.push(RegionTraces { region_id, pixels: 0, rgb, moments: None });
            }
            let t0 = first_frame.unwrap_or(0) as f64 / fps;
            Ok(RegionTraceSet { segment_id, fps, t0, regions: out, dropped: vec![] })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenFrame {
    pub cov: [f64; 6],
    pub eigvals: [f64; 3],
    /// Row-major, eigenvectors in columns.
    pub basis: [f64; 9],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenRegion {
    pub region_id: usize,
    pub pixels: usize,
    pub frames: Vec<EigenFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSegment {
    pub segment_id: usize,
    pub regions: Vec<EigenRegion>,
}

/// Per-frame eigen data of every region that carries moments.
pub fn eigen_sidecar(sets: &[RegionTraceSet]) -> Vec<EigenSegment> {
    sets.iter()
        .map(|set| EigenSegment {
            segment_id: set.segment_id,
            regions: set
                .regions
                .iter()
                .filter_map(|r| {
                    r.moments.as_ref().map(|m| EigenRegion {
                        region_id: r.region_id,
                        pixels: r.pixels,
                        frames: m
                            .iter()
                            .map(|c| EigenFrame {
                                cov: c.cov_upper(),
                                eigvals: c.eigvals,
                                basis: [0, 1, 2, 3, 4, 5, 6, 7, 8].map(|k| c.basis[k / 3][k % 3]),
                            })
                            .collect(),
                    })
                })
                .collect(),
        })
        .collect()
}

pub fn write_eigen_json<W: Write>(sets: &[RegionTraceSet], w: W) -> Result<()> {
    serde_json::to_writer(w, &eigen_sidecar(sets))?;
    Ok(())
}

/// Attach sidecar eigen data to traces read from CSV; per-frame means come from the traces.
pub fn attach_eigen(sets: &mut [RegionTraceSet], sidecar: &[EigenSegment]) -> Result<()> {
    for seg in sidecar {
        let Some(set) = sets.iter_mut().find(|s| s.segment_id == seg.segment_id) else {
            return Err(Error::Parse(format!("eigen data for unknown segment {}", seg.segment_id)));
        };
        for er in &seg.regions {
            let Some(region) = set.regions.iter_mut().find(|r| r.region_id == er.region_id) else {
                return Err(Error::Parse(format!("eigen data for unknown region {}", er.region_id)));
            };
            if er.frames.len() != region.len() {
                return Err(Error::Parse(format!("region {}: eigen frames do not match trace length", er.region_id)));
            }
            let moments = er
                .frames
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let c = f.cov;
                    ColorMoments {
                        mean: [region.rgb[0][i], region.rgb[1][i], region.rgb[2][i]],
                        cov: [[c[0], c[1], c[2]], [c[1], c[3], c[4]], [c[2], c[4], c[5]]],
                        eigvals: f.eigvals,
                        basis: [0, 1, 2].map(|r| [f.basis[3 * r], f.basis[3 * r + 1], f.basis[3 * r + 2]]),
                    }
                })
                .collect();
            region.moments = Some(moments);
            region.pixels = er.pixels;
        }
    }
    Ok(())
}

pub fn read_eigen_json<R: Read>(r: R) -> Result<Vec<EigenSegment>> {
    Ok(serde_json::from_reader(r)?)
}

/// `t_s,mv`.
pub fn write_ecg_csv<W: Write>(ecg: &TimeSeries, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t_s", "mv"])?;
    for (i, v) in ecg.samples().iter().enumerate() {
        out.write_record([ecg.time_at(i).to_string(), v.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Two columns `t_s,mv`, or one column `mv` with `fs` supplied. The sampling
/// rate of a timed file is taken from its span and rounded to 1e-6 Hz.
pub fn read_ecg_csv<R: Read>(r: R, fs: Option<f64>) -> Result<TimeSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let headers = rdr.headers()?.clone();
    let timed = headers.len() >= 2;
    let (mut t, mut v) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k).ok_or_else(|| Error::Parse("short ECG row".into()))?.trim().parse().map_err(|_| Error::Parse(format!("bad ECG value in row {:?}", rec)))
        };
        if timed {
            t.push(num(0)?);
            v.push(num(1)?);
        } else {
            v.push(num(0)?);
        }
    }
    if timed {
        if t.len() < 2 {
            return Err(Error::InsufficientSamples { needed: 2, got: t.len() });
        }
        let span = t[t.len() - 1] - t[0];
        if !(span > 0.0) {
            return Err(Error::Parse("ECG time column is not increasing".into()));
        }
        let fs = ((t.len() - 1) as f64 / span * 1e6).round() / 1e6;
        TimeSeries::new(v, fs, t[0])
    } else {
        let fs = fs.ok_or_else(|| Error::Config("single-column ECG needs a sampling rate".into()))?;
        TimeSeries::new(v, fs, 0.0)
    }
}

pub fn read_ecg_file(path: &Path, fs: Option<f64>) -> Result<TimeSeries> {
    read_ecg_csv(BufReader::new(File::open(path)?), fs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roi::{extract_traces, slic_segment, DEFAULT_COMPACTNESS};
    use crate::synth::{gen_pixels, SynthSpec};

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(7, 5, |x, y| image::Rgb([x as u8 * 30, y as u8 * 40, 200]));
        let p = frame_path(dir.path(), 3);
        assert!(p.ends_with("frame_000003.ppm"));
        write_ppm(&p, &img).unwrap();
        assert_eq!(&std::fs::read(&p).unwrap()[..2], b"P6");
        assert_eq!(read_ppm(&p).unwrap(), img);
    }

    #[test]
    fn manifest_bbox_is_array() {
        let m = Manifest {
            fps: 30.0,
            width: 64,
            height: 48,
            segments: vec![ManifestSegment { start_frame: 0, bbox: BBox { x: 2, y: 3, w: 40, h: 30 }, condition: Some("BSL".into()) }],
            recording_id: None,
            ecg_fs: None,
        };
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"bbox\":[2,3,40,30]"), "{s}");
        assert_eq!(serde_json::from_str::<Manifest>(&s).unwrap(), m);
        let bad = Manifest { width: 30, ..m };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn traces_and_eigen_round_trip() {
        let spec = SynthSpec { duration_s: 2.0, noise_sigma: 2.0, ..SynthSpec::default() };
        let (stack, _) = gen_pixels(&spec, 900).unwrap();
        let map = slic_segment(&stack.frames[0], stack.bbox, 4, DEFAULT_COMPACTNESS).unwrap();
        let set = extract_traces(&stack, &map).unwrap();
        let mut csv_buf = Vec::new();
        write_traces_csv(std::slice::from_ref(&set), &mut csv_buf).unwrap();
        let mut json_buf = Vec::new();
        write_eigen_json(std::slice::from_ref(&set), &mut json_buf).unwrap();
        let mut back = read_traces_csv(csv_buf.as_slice(), 30.0).unwrap();
        attach_eigen(&mut back, &read_eigen_json(json_buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].regions, set.regions);
        assert_eq!(back[0].t0, set.t0);
    }

    #[test]
    fn ecg_csv_forms() {
        let x = TimeSeries::new(vec![0.1, 0.5, -0.2, 0.0], 250.0, 1.0).unwrap();
        let mut buf = Vec::new();
        write_ecg_csv(&x, &mut buf).unwrap();
        let back = read_ecg_csv(buf.as_slice(), None).unwrap();
        assert_eq!(back.samples(), x.samples());
        assert_eq!(back.fs(), 250.0);
        assert_eq!(back.t0(), 1.0);
        let single = read_ecg_csv("mv\n1\n2\n3\n".as_bytes(), Some(100.0)).unwrap();
        assert_eq!(single.samples(), &[1.0, 2.0, 3.0]);
        assert!(matches!(read_ecg_csv("mv\n1\n".as_bytes(), None), Err(Error::Config(_))));
    }
}
