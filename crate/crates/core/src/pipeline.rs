//! End-to-end runs: per-segment extraction, enhancement, detection and
//! scoring over the (method x enhancement x SP count) grid, then gating,
//! per-condition region selection and evaluation against the ECG.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::beats::{detect_ecg_rpeaks, detect_rppg_peaks, hrv, HrvTriple, PeakTrain};
use crate::enhance::{adaptive_bandpass, dominant_frequency, Enhancement, SweepSegment, FALLBACK_SD_HZ, HR_BAND};
use crate::error::{Error, Result};
use crate::evaluate::{agreement, compare_conditions, match_beats, prf1, Agreement, ComparisonCell, Criterion, MatchCounts};
use crate::extract::{extract_pulse, Method};
use crate::io::{attach_eigen, read_ecg_file, read_eigen_json, read_frames, read_traces_csv, Manifest};
use crate::par::Execution;
use crate::quality::{gate_with, select_region, select_region_by_snr, snr_triple, write_region_scores, RegionScore, SnrTriple, DEFAULT_GATE_DB};
use crate::roi::{extract_traces_with, slic_segment, RegionTraceSet, DEFAULT_COMPACTNESS};
use crate::signal::{design_filter, filtfilt, IirFilterSpec, TimeSeries};
use crate::synth::{EcgSpec, FaceLayout, Recording};

pub const DEFAULT_SEGMENT_S: f64 = 20.0;
pub const MIN_SEGMENT_S: f64 = 10.0;
pub const SP_CHOICES: [usize; 2] = [10, 20];
pub const DEFAULT_CONDITION: &str = "ALL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// ECG-referenced SNR, region selection and evaluation.
    #[default]
    Ecg,
    /// No ECG: selection on the self-referenced narrow-band SNR, no error metrics.
    SelfReferenced,
}

/// Condition label for segments `first..=last` (0-based segment index).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionRange {
    pub first: usize,
    pub last: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub recording_id: String,
    /// Trace CSV; used when `frames` is absent.
    pub traces: Option<PathBuf>,
    /// Eigen sidecar for `traces`, needed by 2SR.
    pub eigen: Option<PathBuf>,
    /// Directory of `frame_%06d.ppm`.
    pub frames: Option<PathBuf>,
    /// Defaults to `manifest.json` inside `frames`.
    pub manifest: Option<PathBuf>,
    pub ecg: Option<PathBuf>,
    pub methods: Vec<Method>,
    pub enhancements: Vec<Enhancement>,
    pub sp_counts: Vec<usize>,
    pub segment_s: f64,
    pub snr_gate_db: f64,
    /// Overrides manifest condition labels.
    pub conditions: Vec<ConditionRange>,
    pub reference: ReferenceMode,
    /// Fixed bandpass SD; by default estimated per condition from the ECG.
    pub sd_hz: Option<f64>,
    pub out_dir: Option<PathBuf>,
    /// 0 = all cores, 1 = sequential.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            recording_id: "recording".into(),
            traces: None,
            eigen: None,
            frames: None,
            manifest: None,
            ecg: None,
            methods: vec![Method::Chrom, Method::Pos, Method::Pca, Method::Ssr],
            enhancements: vec![Enhancement::none()],
            sp_counts: vec![20],
            segment_s: DEFAULT_SEGMENT_S,
            snr_gate_db: DEFAULT_GATE_DB,
            conditions: vec![],
            reference: ReferenceMode::Ecg,
            sd_hz: None,
            out_dir: None,
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let c: RunConfig =
            serde_json::from_reader(BufReader::new(File::open(path)?)).map_err(|e| Error::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.enhancements.is_empty() {
            return Err(Error::Config("at least one enhancement (possibly NONE) is required".into()));
        }
        for e in &self.enhancements {
            e.validate()?;
        }
        if !(self.segment_s > MIN_SEGMENT_S) {
            return Err(Error::Config(format!("segment_s must exceed {MIN_SEGMENT_S} s, got {}", self.segment_s)));
        }
        if self.sp_counts.is_empty() || self.sp_counts.iter().any(|k| !SP_CHOICES.contains(k)) {
            return Err(Error::Config(format!("sp_counts must be a non-empty subset of {SP_CHOICES:?}")));
        }
        if !self.snr_gate_db.is_finite() {
            return Err(Error::Config("snr_gate_db must be finite".into()));
        }
        if self.sd_hz.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::Config("sd_hz must be positive".into()));
        }
        if self.conditions.iter().any(|c| c.first > c.last || c.label.is_empty()) {
            return Err(Error::Config("condition ranges need first <= last and a label".into()));
        }
        Ok(())
    }

    pub fn execution(&self) -> Execution {
        match self.workers {
            0 => Execution::Auto,
            n => Execution::from_workers(n),
        }
    }

    fn condition_for(&self, index: usize) -> Option<&str> {
        self.conditions.iter().find(|c| (c.first..=c.last).contains(&index)).map(|c| c.label.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMeta {
    pub segment_id: usize,
    pub t0: f64,
    pub condition: String,
}

/// Where segment traces come from.
pub trait SegmentSource: Sync {
    fn segments(&self) -> &[SegmentMeta];
    /// Region layout fixed by the input (trace files); frame inputs return `None`
    /// and build regions per SP count.
    fn fixed_sp(&self) -> Option<usize>;
    fn has_moments(&self) -> bool;
    fn traces(&self, index: usize, sp_count: usize) -> Result<RegionTraceSet>;
    /// Whole-recording ECG.
    fn ecg(&self) -> Option<&TimeSeries>;
}

fn relabel(metas: &mut [SegmentMeta], cfg: &RunConfig) {
    for (i, m) in metas.iter_mut().enumerate() {
        if let Some(l) = cfg.condition_for(i) {
            m.condition = l.to_string();
        }
    }
}

/// Pre-extracted traces held in memory.
pub struct TraceSource {
    metas: Vec<SegmentMeta>,
    sets: Vec<RegionTraceSet>,
    ecg: Option<TimeSeries>,
}

impl TraceSource {
    pub fn new(sets: Vec<RegionTraceSet>, conditions: Vec<String>, ecg: Option<TimeSeries>) -> Result<Self> {
        if conditions.len() != sets.len() {
            return Err(Error::Config("one condition label per segment is required".into()));
        }
        let metas = sets
            .iter()
            .zip(conditions)
            .map(|(s, condition)| SegmentMeta { segment_id: s.segment_id, t0: s.t0, condition })
            .collect();
        Ok(Self { metas, sets, ecg })
    }
}

impl SegmentSource for TraceSource {
    fn segments(&self) -> &[SegmentMeta] {
        &self.metas
    }

    fn fixed_sp(&self) -> Option<usize> {
        Some(self.sets.iter().map(|s| s.regions.len()).max().unwrap_or(0))
    }

    fn has_moments(&self) -> bool {
        self.sets.iter().all(|s| s.regions.iter().all(|r| r.moments.is_some()))
    }

    fn traces(&self, index: usize, _sp: usize) -> Result<RegionTraceSet> {
        Ok(self.sets[index].clone())
    }

    fn ecg(&self) -> Option<&TimeSeries> {
        self.ecg.as_ref()
    }
}

/// PPM frame directory plus manifest; superpixels are built on each segment's first frame.
pub struct FrameSource {
    dir: PathBuf,
    manifest: Manifest,
    metas: Vec<SegmentMeta>,
    frames_per_segment: usize,
    ecg: Option<TimeSeries>,
}

impl FrameSource {
    pub fn new(dir: PathBuf, manifest: Manifest, segment_s: f64, ecg: Option<TimeSeries>) -> Result<Self> {
        manifest.validate()?;
        let metas = manifest
            .segments
            .iter()
            .enumerate()
            .map(|(i, s)| SegmentMeta {
                segment_id: i,
                t0: s.start_frame as f64 / manifest.fps,
                condition: s.condition.clone().unwrap_or_else(|| DEFAULT_CONDITION.into()),
            })
            .collect();
        let frames_per_segment = (segment_s * manifest.fps).round() as usize;
        Ok(Self { dir, manifest, metas, frames_per_segment, ecg })
    }
}

impl SegmentSource for FrameSource {
    fn segments(&self) -> &[SegmentMeta] {
        &self.metas
    }

    fn fixed_sp(&self) -> Option<usize> {
        None
    }

    fn has_moments(&self) -> bool {
        true
    }

    fn traces(&self, index: usize, sp_count: usize) -> Result<RegionTraceSet> {
        let seg = &self.manifest.segments[index];
        let stack = read_frames(&self.dir, seg.start_frame, self.frames_per_segment, self.manifest.fps, seg.bbox)?;
        let map = slic_segment(&stack.frames[0], seg.bbox, sp_count, DEFAULT_COMPACTNESS)?;
        extract_traces_with(&stack, &map, index, Execution::Sequential)
    }

    fn ecg(&self) -> Option<&TimeSeries> {
        self.ecg.as_ref()
    }
}

/// Synthetic recording rendered segment by segment on demand. Without a
/// layout each segment is a single mean-RGB region.
pub struct SynthSource {
    recording: Recording,
    layout: Option<FaceLayout>,
    frames_per_segment: usize,
    metas: Vec<SegmentMeta>,
    ecg: Option<TimeSeries>,
    overrides: BTreeMap<usize, Recording>,
}

impl SynthSource {
    pub fn new(recording: Recording, n_segments: usize, segment_s: f64, layout: Option<FaceLayout>, ecg: Option<&EcgSpec>) -> Result<Self> {
        let fps = recording.spec.fps;
        let frames_per_segment = (segment_s * fps).round() as usize;
        let metas = (0..n_segments)
            .map(|i| SegmentMeta {
                segment_id: i,
                t0: (i * frames_per_segment) as f64 / fps,
                condition: DEFAULT_CONDITION.into(),
            })
            .collect();
        let ecg = match ecg {
            Some(spec) => Some(recording.ecg(spec, 0.0, (n_segments * frames_per_segment) as f64 / fps).series()?),
            None => None,
        };
        Ok(Self { recording, layout, frames_per_segment, metas, ecg, overrides: BTreeMap::new() })
    }

    pub fn with_conditions(mut self, labels: &[&str]) -> Self {
        for (m, l) in self.metas.iter_mut().zip(labels) {
            m.condition = l.to_string();
        }
        self
    }

    /// Render segment `index` with different noise or drift settings; beat times are unchanged.
    pub fn corrupt(mut self, index: usize, noise_sigma: f64, drift: (f64, f64)) -> Self {
        let mut rec = self.recording.clone();
        rec.spec.noise_sigma = noise_sigma;
        rec.spec.drift = drift;
        self.overrides.insert(index, rec);
        self
    }

    pub fn recording(&self) -> &Recording {
        &self.recording
    }
}

impl SegmentSource for SynthSource {
    fn segments(&self) -> &[SegmentMeta] {
        &self.metas
    }

    fn fixed_sp(&self) -> Option<usize> {
        self.layout.is_none().then_some(1)
    }

    fn has_moments(&self) -> bool {
        self.layout.is_some()
    }

    fn traces(&self, index: usize, sp_count: usize) -> Result<RegionTraceSet> {
        let rec = self.overrides.get(&index).unwrap_or(&self.recording);
        let start = index * self.frames_per_segment;
        match &self.layout {
            None => rec.traces(index, start, self.frames_per_segment),
            Some(layout) => {
                let stack = rec.frames(layout, start, self.frames_per_segment)?;
                let map = slic_segment(&stack.frames[0], layout.bbox, sp_count, DEFAULT_COMPACTNESS)?;
                extract_traces_with(&stack, &map, index, Execution::Sequential)
            }
        }
    }

    fn ecg(&self) -> Option<&TimeSeries> {
        self.ecg.as_ref()
    }
}

/// Build the source named by a config.
pub fn open_source(cfg: &RunConfig) -> Result<Box<dyn SegmentSource>> {
    let manifest_path = cfg.manifest.clone().or_else(|| cfg.frames.as_ref().map(|d| d.join("manifest.json")));
    let manifest = manifest_path.as_deref().map(Manifest::read).transpose()?;
    let ecg = cfg.ecg.as_deref().map(|p| read_ecg_file(p, manifest.as_ref().and_then(|m| m.ecg_fs))).transpose()?;
    if let Some(dir) = &cfg.frames {
        let manifest = manifest.ok_or_else(|| Error::Config("frame input needs a manifest".into()))?;
        let mut src = FrameSource::new(dir.clone(), manifest, cfg.segment_s, ecg)?;
        relabel(&mut src.metas, cfg);
        return Ok(Box::new(src));
    }
    let Some(path) = &cfg.traces else {
        return Err(Error::Config("either frames or traces must be given".into()));
    };
    let text = fs::read_to_string(path)?;
    let fps = match &manifest {
        Some(m) => m.fps,
        None => infer_fps(&text)?,
    };
    let mut sets = read_traces_csv(text.as_bytes(), fps)?;
    if let Some(eigen) = &cfg.eigen {
        attach_eigen(&mut sets, &read_eigen_json(BufReader::new(File::open(eigen)?))?)?;
    }
    let labels = (0..sets.len())
        .map(|i| {
            let from_manifest = manifest.as_ref().and_then(|m| m.segments.get(i)).and_then(|s| s.condition.clone());
            cfg.condition_for(i).map(str::to_string).or(from_manifest).unwrap_or_else(|| DEFAULT_CONDITION.into())
        })
        .collect();
    Ok(Box::new(TraceSource::new(sets, labels, ecg)?))
}

/// Frame rate from the largest `frame_idx / t_s` row of a trace CSV.
fn infer_fps(text: &str) -> Result<f64> {
    #[derive(Deserialize)]
    struct Row {
        frame_idx: usize,
        t_s: f64,
    }
    let mut best: Option<Row> = None;
    for r in csv::Reader::from_reader(text.as_bytes()).deserialize::<Row>() {
        let r = r?;
        if best.as_ref().is_none_or(|b| r.frame_idx > b.frame_idx) {
            best = Some(r);
        }
    }
    match best {
        Some(r) if r.frame_idx > 0 && r.t_s > 0.0 => Ok(((r.frame_idx as f64 / r.t_s) * 1e6).round() / 1e6),
        _ => Err(Error::Config("cannot infer the frame rate from the traces; give a manifest".into())),
    }
}

/// ECG-derived reference values for one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceBeats {
    pub hr_bpm: f64,
    pub sdnn_s: Option<f64>,
    pub rmssd_s: Option<f64>,
    pub n_peaks: usize,
    #[serde(skip)]
    pub peaks: PeakTrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IbiCounts {
    pub strict: MatchCounts,
    pub medium: MatchCounts,
    pub relaxed: MatchCounts,
}

impl IbiCounts {
    pub fn get(&self, c: Criterion) -> MatchCounts {
        match c {
            Criterion::Strict => self.strict,
            Criterion::Medium => self.medium,
            Criterion::Relaxed => self.relaxed,
        }
    }
}

/// One (segment, SP count, region, method, enhancement) result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub recording_id: String,
    pub segment_id: usize,
    pub condition: String,
    pub t0_s: f64,
    pub sp_count: usize,
    pub region_id: usize,
    pub method: Method,
    pub enhancement: Enhancement,
    pub f0_hz: Option<f64>,
    pub low_confidence: bool,
    pub snr: Option<SnrTriple>,
    pub keep: bool,
    pub pr_bpm: Option<f64>,
    pub sdnn_s: Option<f64>,
    pub rmssd_s: Option<f64>,
    pub n_peaks: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceBeats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ibi: Option<IbiCounts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IbiScore {
    #[serde(flatten)]
    pub counts: MatchCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-segment values of the selected region, for Bland-Altman plots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentPair {
    pub segment_id: usize,
    pub pr_est: f64,
    pub pr_ref: Option<f64>,
    pub sdnn_est: Option<f64>,
    pub sdnn_ref: Option<f64>,
    pub rmssd_est: Option<f64>,
    pub rmssd_ref: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub recording_id: String,
    pub condition: String,
    pub method: Method,
    pub enhancement: Enhancement,
    pub sp_count: usize,
    pub selected_region: Option<usize>,
    pub n_segments: usize,
    /// Gate rejections of the selected region.
    pub n_rejected: usize,
    pub rejected_segments: Vec<usize>,
    pub mean_pr_bpm: Option<f64>,
    pub mean_snr_db: Option<f64>,
    pub pr: Option<Agreement>,
    pub sdnn: Option<Agreement>,
    pub rmssd: Option<Agreement>,
    pub ibi: BTreeMap<String, IbiScore>,
    pub stats: Vec<ComparisonCell>,
    pub region_scores: Vec<RegionScore>,
    pub pairs: Vec<SegmentPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub recording_id: String,
    pub reference: ReferenceMode,
    pub n_segments: usize,
    pub methods: Vec<Method>,
    pub enhancements: Vec<Enhancement>,
    pub sp_counts: Vec<usize>,
    pub snr_gate_db: f64,
    pub sd_hz: BTreeMap<String, f64>,
    pub evaluations: Vec<EvaluationReport>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitTiming {
    pub segment_id: usize,
    pub sp_count: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub segments: Vec<SegmentReport>,
    pub timings: Vec<UnitTiming>,
}

fn artifact_notch(x: &TimeSeries) -> Result<TimeSeries> {
    filtfilt(x, &design_filter(&IirFilterSpec::artifact_notch(), x.fs())?)
}

fn reference_for(ecg: &TimeSeries, t0: f64, dur: f64) -> Result<ReferenceBeats> {
    let peaks = detect_ecg_rpeaks(&ecg.slice_time(t0, dur)?)?;
    let h = hrv(&peaks);
    let hr = crate::beats::pulse_rate(&peaks)?;
    Ok(ReferenceBeats {
        hr_bpm: hr,
        sdnn_s: h.as_ref().ok().map(|h| h.sdnn_s),
        rmssd_s: h.as_ref().ok().map(|h| h.rmssd_s),
        n_peaks: peaks.len(),
        peaks,
    })
}

/// SD of the instantaneous pulse frequency `1 / IBI`, pooled over segments.
fn pulse_frequency_sd(refs: &[&ReferenceBeats]) -> Option<f64> {
    let f: Vec<f64> = refs.iter().flat_map(|r| r.peaks.ibis()).map(|d| 1.0 / d).collect();
    if f.len() < 3 {
        return None;
    }
    let n = f.len() as f64;
    let m = f.iter().sum::<f64>() / n;
    Some((f.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt())
}

struct UnitContext<'a> {
    cfg: &'a RunConfig,
    meta: &'a SegmentMeta,
    reference: Option<&'a ReferenceBeats>,
    sd_hz: f64,
}

fn process_unit(ctx: &UnitContext, set: &RegionTraceSet, sp_count: usize) -> Vec<SegmentReport> {
    let mut out = Vec::new();
    for region in &set.regions {
        for &method in &ctx.cfg.methods {
            let base = SegmentReport {
                recording_id: ctx.cfg.recording_id.clone(),
                segment_id: ctx.meta.segment_id,
                condition: ctx.meta.condition.clone(),
                t0_s: set.t0,
                sp_count,
                region_id: region.region_id,
                method,
                enhancement: Enhancement::none(),
                f0_hz: None,
                low_confidence: false,
                snr: None,
                keep: false,
                pr_bpm: None,
                sdnn_s: None,
                rmssd_s: None,
                n_peaks: 0,
                reference: ctx.reference.cloned(),
                ibi: None,
                error: None,
            };
            match prepare(ctx, set, region, method) {
                Err(e) => out.extend(ctx.cfg.enhancements.iter().map(|&enhancement| SegmentReport {
                    enhancement,
                    error: Some(e.to_string()),
                    ..base.clone()
                })),
                Ok(p) => {
                    for &enhancement in &ctx.cfg.enhancements {
                        let mut r = SegmentReport {
                            enhancement,
                            f0_hz: Some(p.f0),
                            low_confidence: p.low_confidence,
                            snr: Some(p.snr),
                            keep: p.keep,
                            ..base.clone()
                        };
                        match enhancement.apply(&p.bandpassed).and_then(|y| detect_rppg_peaks(&y)) {
                            Err(e) => r.error = Some(e.to_string()),
                            Ok(peaks) => fill_beats(&mut r, &peaks, ctx.reference),
                        }
                        out.push(r);
                    }
                }
            }
        }
    }
    out
}

struct Prepared {
    f0: f64,
    low_confidence: bool,
    snr: SnrTriple,
    keep: bool,
    bandpassed: TimeSeries,
}

fn prepare(ctx: &UnitContext, set: &RegionTraceSet, region: &crate::roi::RegionTraces, method: Method) -> Result<Prepared> {
    let pulse = extract_pulse(set, region, method)?;
    let dom = dominant_frequency(&pulse.series)?;
    let ecg_f0 = ctx.reference.map(|r| r.hr_bpm / 60.0).filter(|f| (HR_BAND.0..=HR_BAND.1).contains(f));
    let mut snr = snr_triple(&pulse.series, ecg_f0, dom.hz)?;
    if ctx.cfg.reference == ReferenceMode::SelfReferenced {
        snr.snr_narrow_ecg_db = None;
    }
    let keep = gate_with(snr.snr_band_db, ctx.cfg.snr_gate_db).keep;
    let bandpassed = adaptive_bandpass(&artifact_notch(&pulse.series)?, dom.hz, ctx.sd_hz)?;
    Ok(Prepared { f0: dom.hz, low_confidence: dom.low_confidence, snr, keep, bandpassed })
}

/// Pre-enhancement signal of one region: 2 Hz notch, dominant frequency, then
/// the harmonic bandpass. Returns the dominant frequency and the filtered pulse.
pub fn condition_pulse(pulse: &TimeSeries, sd_hz: f64) -> Result<(f64, TimeSeries)> {
    let dom = dominant_frequency(pulse)?;
    Ok((dom.hz, adaptive_bandpass(&artifact_notch(pulse)?, dom.hz, sd_hz)?))
}

/// Bandpassed pulses of each condition's selected region (chosen with no
/// enhancement) on surviving segments, paired with the ECG heart rate.
pub fn sweep_inputs(cfg: &RunConfig, source: &dyn SegmentSource, method: Method, sp_count: usize) -> Result<Vec<SweepSegment>> {
    let base = RunConfig { methods: vec![method], enhancements: vec![Enhancement::none()], sp_counts: vec![sp_count], ..cfg.clone() };
    let out = run_pipeline(&base, source)?;
    let rows: Vec<&SegmentReport> = out
        .report
        .evaluations
        .iter()
        .filter_map(|e| e.selected_region.map(|r| (e, r)))
        .flat_map(|(e, r)| {
            out.segments.iter().filter(move |s| s.condition == e.condition && s.region_id == r && s.keep && s.reference.is_some())
        })
        .collect();
    let index_of: BTreeMap<usize, usize> = source.segments().iter().enumerate().map(|(i, m)| (m.segment_id, i)).collect();
    let segments: Vec<Result<Option<SweepSegment>>> = base.execution().map(&rows, |r| {
        let set = source.traces(index_of[&r.segment_id], r.sp_count)?;
        let Some(region) = set.regions.iter().find(|g| g.region_id == r.region_id) else {
            return Ok(None);
        };
        let pulse = extract_pulse(&set, region, method)?;
        let (_, signal) = condition_pulse(&pulse.series, out.report.sd_hz[&r.condition])?;
        Ok(Some(SweepSegment { signal, ref_hr_bpm: r.reference.as_ref().expect("filtered").hr_bpm }))
    });
    let v: Vec<SweepSegment> = segments.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    if v.is_empty() {
        return Err(Error::EmptySweep);
    }
    Ok(v)
}

fn fill_beats(r: &mut SegmentReport, peaks: &PeakTrain, reference: Option<&ReferenceBeats>) {
    r.n_peaks = peaks.len();
    r.pr_bpm = crate::beats::pulse_rate(peaks).ok();
    if let Ok(HrvTriple { sdnn_s, rmssd_s, .. }) = hrv(peaks) {
        r.sdnn_s = Some(sdnn_s);
        r.rmssd_s = Some(rmssd_s);
    }
    if let Some(refb) = reference {
        let m = |c| match_beats(peaks, &refb.peaks, c).ok();
        if let (Some(strict), Some(medium), Some(relaxed)) = (m(Criterion::Strict), m(Criterion::Medium), m(Criterion::Relaxed)) {
            r.ibi = Some(IbiCounts { strict, medium, relaxed });
        }
    }
}

/// Run the whole grid over a source.
pub fn run_pipeline(cfg: &RunConfig, source: &dyn SegmentSource) -> Result<RunOutput> {
    cfg.validate()?;
    let metas = source.segments();
    if metas.is_empty() {
        return Err(Error::EmptyReport("input has no segments".into()));
    }
    if cfg.reference == ReferenceMode::Ecg && source.ecg().is_none() {
        return Err(Error::Config("ECG-referenced mode needs an ECG input (or use self_referenced)".into()));
    }
    if cfg.methods.contains(&Method::Ssr) && !source.has_moments() {
        return Err(Error::Config("2SR needs frames or an eigen sidecar".into()));
    }
    let exec = cfg.execution();
    let mut diagnostics = Vec::new();

    // Reference beats per segment, then the bandpass SD per condition.
    let probe = source.traces(0, cfg.sp_counts[0])?;
    let seg_dur = probe.frame_count() as f64 / probe.fps;
    let references: Vec<Option<ReferenceBeats>> = match (cfg.reference, source.ecg()) {
        (ReferenceMode::Ecg, Some(ecg)) => exec.map(metas, |m| reference_for(ecg, m.t0, seg_dur).ok()),
        _ => vec![None; metas.len()],
    };
    for (m, r) in metas.iter().zip(&references) {
        if cfg.reference == ReferenceMode::Ecg && r.is_none() {
            diagnostics.push(format!("segment {}: no usable ECG reference", m.segment_id));
        }
    }
    let mut sd_hz: BTreeMap<String, f64> = BTreeMap::new();
    for m in metas {
        if sd_hz.contains_key(&m.condition) {
            continue;
        }
        let refs: Vec<&ReferenceBeats> =
            metas.iter().zip(&references).filter(|(n, _)| n.condition == m.condition).filter_map(|(_, r)| r.as_ref()).collect();
        let sd = cfg.sd_hz.or_else(|| pulse_frequency_sd(&refs)).unwrap_or(FALLBACK_SD_HZ);
        sd_hz.insert(m.condition.clone(), sd);
    }

    let sp_grid: Vec<usize> = match source.fixed_sp() {
        Some(k) => vec![k],
        None => cfg.sp_counts.clone(),
    };
    let units: Vec<(usize, usize)> = (0..metas.len()).flat_map(|i| sp_grid.iter().map(move |&k| (i, k))).collect();
    let results: Vec<Result<(Vec<SegmentReport>, UnitTiming)>> = exec.map(&units, |&(i, k)| {
        let started = Instant::now();
        let set = source.traces(i, k)?;
        let ctx = UnitContext { cfg, meta: &metas[i], reference: references[i].as_ref(), sd_hz: sd_hz[&metas[i].condition] };
        let rows = process_unit(&ctx, &set, k);
        let timing = UnitTiming { segment_id: metas[i].segment_id, sp_count: k, seconds: started.elapsed().as_secs_f64() };
        Ok((rows, timing))
    });
    let mut segments = Vec::new();
    let mut timings = Vec::new();
    for r in results {
        let (rows, t) = r?;
        segments.extend(rows);
        timings.push(t);
    }

    let evaluations = evaluate_grid(cfg, &sp_grid, metas, &segments, &mut diagnostics);
    if evaluations.iter().all(|e| e.selected_region.is_none()) {
        let rejected = segments.iter().filter(|s| s.snr.is_some() && !s.keep).count();
        let failed = segments.iter().filter(|s| s.error.is_some()).count();
        return Err(Error::EmptyReport(format!(
            "no segment survived: {rejected} gate rejections, {failed} failed rows out of {}",
            segments.len()
        )));
    }
    let report = RunReport {
        recording_id: cfg.recording_id.clone(),
        reference: cfg.reference,
        n_segments: metas.len(),
        methods: cfg.methods.clone(),
        enhancements: cfg.enhancements.clone(),
        sp_counts: sp_grid,
        snr_gate_db: cfg.snr_gate_db,
        sd_hz,
        evaluations,
        diagnostics,
    };
    Ok(RunOutput { report, segments, timings })
}

fn usable(r: &SegmentReport, mode: ReferenceMode) -> bool {
    r.keep && r.pr_bpm.is_some() && (mode == ReferenceMode::SelfReferenced || r.reference.is_some())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn conditions_in_order(metas: &[SegmentMeta]) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    for m in metas {
        if !seen.contains(&m.condition) {
            seen.push(m.condition.clone());
        }
    }
    seen
}

fn evaluate_grid(
    cfg: &RunConfig,
    sp_grid: &[usize],
    metas: &[SegmentMeta],
    rows: &[SegmentReport],
    diagnostics: &mut Vec<String>,
) -> Vec<EvaluationReport> {
    let conditions = conditions_in_order(metas);
    let mut out = Vec::new();
    for &sp in sp_grid {
        for &method in &cfg.methods {
            for &enh in &cfg.enhancements {
                let group: Vec<&SegmentReport> =
                    rows.iter().filter(|r| r.sp_count == sp && r.method == method && r.enhancement == enh).collect();
                let mut evals: Vec<EvaluationReport> =
                    conditions.iter().map(|c| evaluate_condition(cfg, c, sp, method, enh, &group, diagnostics)).collect();
                let stats = condition_stats(cfg, &evals, &group);
                for e in &mut evals {
                    e.stats = stats.clone();
                }
                out.extend(evals);
            }
        }
    }
    out
}

fn evaluate_condition(
    cfg: &RunConfig,
    condition: &str,
    sp: usize,
    method: Method,
    enhancement: Enhancement,
    group: &[&SegmentReport],
    diagnostics: &mut Vec<String>,
) -> EvaluationReport {
    let rows: Vec<&SegmentReport> = group.iter().copied().filter(|r| r.condition == condition).collect();
    let mut region_ids: Vec<usize> = rows.iter().map(|r| r.region_id).collect();
    region_ids.sort_unstable();
    region_ids.dedup();
    let n_segments = {
        let mut ids: Vec<usize> = rows.iter().map(|r| r.segment_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    };

    let scores: Vec<RegionScore> = region_ids
        .iter()
        .filter_map(|&id| {
            let used: Vec<&&SegmentReport> = rows.iter().filter(|r| r.region_id == id && usable(r, cfg.reference)).collect();
            if used.is_empty() {
                return None;
            }
            let (mae, snr) = match cfg.reference {
                ReferenceMode::Ecg => {
                    let errs: Vec<f64> =
                        used.iter().map(|r| (r.pr_bpm.unwrap() - r.reference.as_ref().unwrap().hr_bpm).abs()).collect();
                    let snrs: Vec<f64> = used.iter().filter_map(|r| r.snr.and_then(|s| s.snr_narrow_ecg_db)).collect();
                    (mean(&errs), if snrs.is_empty() { f64::NEG_INFINITY } else { mean(&snrs) })
                }
                ReferenceMode::SelfReferenced => {
                    let snrs: Vec<f64> = used.iter().map(|r| r.snr.unwrap().snr_narrow_rppg_db).collect();
                    (f64::NAN, mean(&snrs))
                }
            };
            Some(RegionScore { region_id: id, mae_bpm: mae, mean_snr_db: snr, n_segments_used: used.len() })
        })
        .collect();
    let selected = match cfg.reference {
        ReferenceMode::Ecg => select_region(&scores),
        ReferenceMode::SelfReferenced => select_region_by_snr(&scores),
    }
    .ok();

    let mut report = EvaluationReport {
        recording_id: cfg.recording_id.clone(),
        condition: condition.to_string(),
        method,
        enhancement,
        sp_count: sp,
        selected_region: selected,
        n_segments,
        n_rejected: 0,
        rejected_segments: vec![],
        mean_pr_bpm: None,
        mean_snr_db: None,
        pr: None,
        sdnn: None,
        rmssd: None,
        ibi: BTreeMap::new(),
        stats: vec![],
        region_scores: scores.clone(),
        pairs: vec![],
    };
    let label = format!("{condition}/{method}/{enhancement}/sp{sp}");
    let Some(region) = selected else {
        diagnostics.push(format!("{label}: no region with a usable segment"));
        return report;
    };
    let sel: Vec<&SegmentReport> = rows.iter().copied().filter(|r| r.region_id == region).collect();
    report.rejected_segments = sel.iter().filter(|r| r.snr.is_some() && !r.keep).map(|r| r.segment_id).collect();
    report.n_rejected = report.rejected_segments.len();
    report.mean_snr_db = scores.iter().find(|s| s.region_id == region).map(|s| s.mean_snr_db);
    let used: Vec<&SegmentReport> = sel.iter().copied().filter(|r| usable(r, cfg.reference)).collect();
    report.mean_pr_bpm = Some(mean(&used.iter().map(|r| r.pr_bpm.unwrap()).collect::<Vec<_>>()));
    report.pairs = used
        .iter()
        .map(|r| {
            let rf = r.reference.as_ref();
            SegmentPair {
                segment_id: r.segment_id,
                pr_est: r.pr_bpm.unwrap(),
                pr_ref: rf.map(|x| x.hr_bpm),
                sdnn_est: r.sdnn_s,
                sdnn_ref: rf.and_then(|x| x.sdnn_s),
                rmssd_est: r.rmssd_s,
                rmssd_ref: rf.and_then(|x| x.rmssd_s),
            }
        })
        .collect();
    if cfg.reference == ReferenceMode::Ecg {
        let paired = |f: &dyn Fn(&SegmentPair) -> (Option<f64>, Option<f64>)| -> Option<Agreement> {
            let (e, r): (Vec<f64>, Vec<f64>) = report.pairs.iter().filter_map(|p| match f(p) {
                (Some(a), Some(b)) => Some((a, b)),
                _ => None,
            }).unzip();
            agreement(&e, &r).ok()
        };
        report.pr = paired(&|p| (Some(p.pr_est), p.pr_ref));
        report.sdnn = paired(&|p| (p.sdnn_est, p.sdnn_ref));
        report.rmssd = paired(&|p| (p.rmssd_est, p.rmssd_ref));
        if report.pr.is_none() {
            diagnostics.push(format!("{label}: fewer than two paired segments for agreement"));
        }
        for c in Criterion::ALL {
            let counts: MatchCounts = used.iter().filter_map(|r| r.ibi.map(|i| i.get(c))).sum();
            let p = prf1(&counts);
            report.ibi.insert(c.name().to_string(), IbiScore { counts, precision: p.precision, recall: p.recall, f1: p.f1 });
        }
    }
    report
}

/// BSL-vs-DS cells for the selected regions' rPPG values and the ECG reference.
fn condition_stats(cfg: &RunConfig, evals: &[EvaluationReport], group: &[&SegmentReport]) -> Vec<ComparisonCell> {
    let pairs_of = |cond: &str| evals.iter().find(|e| e.condition == cond).map(|e| e.pairs.clone()).unwrap_or_default();
    let (bsl, ds) = (pairs_of("BSL"), pairs_of("DS"));
    let pick = |v: &[SegmentPair], f: fn(&SegmentPair) -> Option<f64>| v.iter().filter_map(f).collect::<Vec<f64>>();
    let metrics: [(&str, fn(&SegmentPair) -> Option<f64>, fn(&SegmentPair) -> Option<f64>); 3] = [
        ("PR", |p| Some(p.pr_est), |p| p.pr_ref),
        ("SDNN", |p| p.sdnn_est, |p| p.sdnn_ref),
        ("RMSSD", |p| p.rmssd_est, |p| p.rmssd_ref),
    ];
    let mut cells = Vec::new();
    for (name, est, _) in metrics {
        cells.push(compare_conditions("rPPG", name, &pick(&bsl, est), &pick(&ds, est)));
    }
    if cfg.reference == ReferenceMode::Ecg {
        // Reference values come from every segment with an ECG, not just the selected region's survivors.
        let mut by_seg: BTreeMap<usize, &SegmentReport> = BTreeMap::new();
        for r in group {
            by_seg.entry(r.segment_id).or_insert(r);
        }
        let refs = |cond: &str, f: fn(&ReferenceBeats) -> Option<f64>| -> Vec<f64> {
            by_seg.values().filter(|r| r.condition == cond).filter_map(|r| r.reference.as_ref().and_then(f)).collect()
        };
        let ref_metrics: [(&str, fn(&ReferenceBeats) -> Option<f64>); 3] =
            [("PR", |r| Some(r.hr_bpm)), ("SDNN", |r| r.sdnn_s), ("RMSSD", |r| r.rmssd_s)];
        for (name, f) in ref_metrics {
            cells.push(compare_conditions("ECG", name, &refs("BSL", f), &refs("DS", f)));
        }
    }
    cells
}

fn file_label(e: &EvaluationReport) -> String {
    format!("{}_{}_{}_sp{}", e.condition, e.method, e.enhancement.label().replace(':', "-"), e.sp_count)
}

/// `report.json`, `segments.jsonl` and `regions/*.csv` under `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("regions"))?;
    let mut w = BufWriter::new(File::create(dir.join("report.json"))?);
    serde_json::to_writer_pretty(&mut w, &out.report)?;
    w.write_all(b"\n")?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join("segments.jsonl"))?);
    for s in &out.segments {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    for e in &out.report.evaluations {
        let f = File::create(dir.join("regions").join(format!("{}.csv", file_label(e))))?;
        write_region_scores(&e.region_scores, BufWriter::new(f))?;
    }
    Ok(())
}

/// Per-segment wall-clock table from a sequential run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeTable {
    pub rows: Vec<UnitTiming>,
    /// `(sp_count, mean seconds per segment, total seconds)`.
    pub per_sp: Vec<(usize, f64, f64)>,
    /// Mean time at the largest SP count over the smallest.
    pub ratio: Option<f64>,
}

impl RuntimeTable {
    pub fn from_timings(rows: Vec<UnitTiming>) -> Self {
        let mut sps: Vec<usize> = rows.iter().map(|r| r.sp_count).collect();
        sps.sort_unstable();
        sps.dedup();
        let per_sp: Vec<(usize, f64, f64)> = sps
            .iter()
            .map(|&k| {
                let t: Vec<f64> = rows.iter().filter(|r| r.sp_count == k).map(|r| r.seconds).collect();
                let total = t.iter().sum::<f64>();
                (k, total / t.len() as f64, total)
            })
            .collect();
        let ratio = (per_sp.len() >= 2).then(|| per_sp[per_sp.len() - 1].1 / per_sp[0].1);
        Self { rows, per_sp, ratio }
    }

    /// `segment_id,sp_count,seconds`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["segment_id", "sp_count", "seconds"])?;
        for r in &self.rows {
            out.write_record([r.segment_id.to_string(), r.sp_count.to_string(), format!("{:.6}", r.seconds)])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Time every (segment, SP count) unit with a sequential run.
pub fn measure_runtime(cfg: &RunConfig, source: &dyn SegmentSource) -> Result<RuntimeTable> {
    let seq = RunConfig { workers: 1, ..cfg.clone() };
    let out = run_pipeline(&seq, source)?;
    Ok(RuntimeTable::from_timings(out.timings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthSpec;

    fn clean_source(n: usize, ecg: bool) -> SynthSource {
        let rec = Recording::new(SynthSpec { duration_s: n as f64 * 20.0, ..SynthSpec::default() }).unwrap();
        SynthSource::new(rec, n, 20.0, None, ecg.then(EcgSpec::default).as_ref()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        assert!(RunConfig { methods: vec![], ..RunConfig::default() }.validate().is_err());
        assert!(RunConfig { segment_s: 10.0, ..RunConfig::default() }.validate().is_err());
        assert!(RunConfig { sp_counts: vec![15], ..RunConfig::default() }.validate().is_err());
        let json = r#"{"methods":["CHROM","2SR"],"sp_counts":[10,20],"segment_s":20}"#;
        let c: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.methods, vec![Method::Chrom, Method::Ssr]);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus":1}"#).is_err());
    }

    #[test]
    fn clean_traces_recover_rate() {
        let src = clean_source(3, true);
        let cfg = RunConfig { methods: vec![Method::Chrom, Method::Pos], ..RunConfig::default() };
        let out = run_pipeline(&cfg, &src).unwrap();
        assert_eq!(out.segments.len(), 3 * 2);
        for s in &out.segments {
            assert!((s.pr_bpm.unwrap() - 60.0).abs() < 1.0, "{s:?}");
            assert!(s.keep);
        }
        let e = &out.report.evaluations[0];
        assert_eq!(e.selected_region, Some(0));
        assert!(e.pr.unwrap().mae < 1.0);
        assert_eq!(e.pairs.len(), 3);
    }

    #[test]
    fn missing_ecg_is_config_error() {
        let src = clean_source(2, false);
        let cfg = RunConfig { methods: vec![Method::Chrom], ..RunConfig::default() };
        assert!(matches!(run_pipeline(&cfg, &src), Err(Error::Config(_))));
        let cfg = RunConfig { reference: ReferenceMode::SelfReferenced, ..cfg };
        let out = run_pipeline(&cfg, &src).unwrap();
        let e = &out.report.evaluations[0];
        assert!(e.pr.is_none() && e.ibi.is_empty());
        assert!((e.mean_pr_bpm.unwrap() - 60.0).abs() < 1.0);
        assert!(out.segments.iter().all(|s| s.snr.unwrap().snr_narrow_ecg_db.is_none()));
    }

    #[test]
    fn ssr_without_moments_rejected() {
        let src = clean_source(2, true);
        let cfg = RunConfig { methods: vec![Method::Ssr], ..RunConfig::default() };
        assert!(matches!(run_pipeline(&cfg, &src), Err(Error::Config(_))));
    }
}
