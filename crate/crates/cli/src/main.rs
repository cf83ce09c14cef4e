//! `rppg`: batch rPPG analysis from frames or traces.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rppg_core::enhance::{grid_for, Enhancement};
use rppg_core::extract::extract_pulse;
use rppg_core::io::{write_ecg_csv, write_eigen_json, write_frames, write_traces_csv, Manifest, ManifestSegment};
use rppg_core::par::Execution;
use rppg_core::pipeline::{
    condition_pulse, measure_runtime, open_source, run_pipeline, sweep_inputs, write_outputs, ReferenceMode, RunConfig,
    RunReport, DEFAULT_CONDITION,
};
use rppg_core::plot::{emit_plots, emit_sweep};
use rppg_core::roi::{extract_traces_with, slic_segment, BBox, DEFAULT_COMPACTNESS};
use rppg_core::synth::{EcgSpec, FaceLayout, IbiModel, PulseShape, Recording, SynthSpec};
use rppg_core::Error;

#[derive(Parser)]
#[command(name = "rppg", version, about = "Remote photoplethysmography pulse rate and HRV analysis")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Superpixel traces (CSV + eigen JSON) from a PPM frame directory.
    Extract(RunArgs),
    /// Write a synthetic recording: frames or traces, manifest, ECG.
    Synth(SynthArgs),
    /// Bandpassed pulse signals per segment, region and method.
    Pulse(RunArgs),
    /// Full run: reports, region scores and plots.
    Analyze(RunArgs),
    /// Summarise a report.json.
    Evaluate(EvaluateArgs),
    /// Enhancement parameter sweep on the selected regions.
    Sweep(RunArgs),
    /// Plots from a report.json.
    Plot(PlotArgs),
    /// Per-segment runtime per SP count.
    Bench(RunArgs),
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// JSON file mirroring the run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    traces: Option<PathBuf>,
    #[arg(long)]
    eigen: Option<PathBuf>,
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    ecg: Option<PathBuf>,
    /// Run without an ECG reference (self-referenced SNR, no error metrics).
    #[arg(long)]
    no_ecg: bool,
    /// Comma-separated: CHROM,POS,PCA,PCA-inv,2SR.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Comma-separated: NONE, GLFOD:<alpha>, LPNORM:<p>, or the grids GLFOD:all, LPNORM:all.
    #[arg(long, value_delimiter = ',')]
    enhance: Option<Vec<String>>,
    /// Comma-separated superpixel counts (10, 20).
    #[arg(long, value_delimiter = ',')]
    sp: Option<Vec<usize>>,
    #[arg(long)]
    segment_s: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    gate_db: Option<f64>,
    /// 0 = all cores, 1 = sequential.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    recording_id: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthFormat {
    Frames,
    Traces,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "frames")]
    format: SynthFormat,
    #[arg(long, default_value_t = 3)]
    segments: usize,
    #[arg(long, default_value_t = 20.0)]
    segment_s: f64,
    #[arg(long, default_value_t = 60.0)]
    hr: f64,
    /// AR(1) interval SD in seconds; constant intervals when absent.
    #[arg(long)]
    sdnn: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    amp: f64,
    #[arg(long, default_value_t = 2.0)]
    noise: f64,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    #[arg(long, default_value_t = 64)]
    size: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated condition label per segment (repeats the last).
    #[arg(long, value_delimiter = ',')]
    conditions: Option<Vec<String>>,
    #[arg(long)]
    sinusoid: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// report.json from `analyze`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_enhancements(items: &[String]) -> Result<Vec<Enhancement>, Error> {
    let mut out = Vec::new();
    for s in items {
        match s.to_ascii_uppercase().as_str() {
            "GLFOD:ALL" => out.extend(grid_for(rppg_core::enhance::Operator::Glfod)),
            "LPNORM:ALL" | "LP:ALL" => out.extend(grid_for(rppg_core::enhance::Operator::LpNorm)),
            _ => out.push(s.parse()?),
        }
    }
    Ok(out)
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:ident, $val:expr) => {
                if let Some(v) = $val {
                    c.$field = v;
                }
            };
        }
        set!(traces, self.traces.clone().map(Some));
        set!(eigen, self.eigen.clone().map(Some));
        set!(frames, self.frames.clone().map(Some));
        set!(manifest, self.manifest.clone().map(Some));
        set!(ecg, self.ecg.clone().map(Some));
        set!(sp_counts, self.sp.clone());
        set!(segment_s, self.segment_s);
        set!(snr_gate_db, self.gate_db);
        set!(workers, self.workers);
        set!(recording_id, self.recording_id.clone());
        set!(out_dir, self.out.clone().map(Some));
        if let Some(m) = &self.methods {
            c.methods = m.iter().map(|s| s.trim().parse()).collect::<Result<_, _>>()?;
        }
        if let Some(e) = &self.enhance {
            c.enhancements = parse_enhancements(e)?;
        }
        if self.no_ecg {
            c.reference = ReferenceMode::SelfReferenced;
        }
        c.validate()?;
        Ok(c)
    }
}

fn out_dir(c: &RunConfig) -> Result<PathBuf, Error> {
    let d = c.out_dir.clone().ok_or_else(|| Error::Config("--out is required".into()))?;
    fs::create_dir_all(&d)?;
    Ok(d)
}

fn cmd_extract(args: &RunArgs) -> anyhow::Result<()> {
    let c = args.config()?;
    let dir = c.frames.clone().ok_or_else(|| Error::Config("extract needs --frames".into()))?;
    let manifest = Manifest::read(&c.manifest.clone().unwrap_or_else(|| dir.join("manifest.json")))?;
    let out = out_dir(&c)?;
    let n = (c.segment_s * manifest.fps).round() as usize;
    for &k in &c.sp_counts {
        let sets = c.execution().map_range(manifest.segments.len(), |i| {
            let seg = &manifest.segments[i];
            let stack = rppg_core::io::read_frames(&dir, seg.start_frame, n, manifest.fps, seg.bbox)?;
            let map = slic_segment(&stack.frames[0], seg.bbox, k, DEFAULT_COMPACTNESS)?;
            extract_traces_with(&stack, &map, i, Execution::Sequential)
        });
        let sets = sets.into_iter().collect::<Result<Vec<_>, _>>()?;
        write_traces_csv(&sets, BufWriter::new(File::create(out.join(format!("traces_sp{k}.csv")))?))?;
        write_eigen_json(&sets, BufWriter::new(File::create(out.join(format!("eigen_sp{k}.json")))?))?;
        println!("sp {k}: {} segments -> traces_sp{k}.csv, eigen_sp{k}.json", sets.len());
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> anyhow::Result<()> {
    let duration = a.segments as f64 * a.segment_s;
    let model = match a.sdnn {
        Some(sd) => IbiModel::Ar1 { mean_s: 60.0 / a.hr, sdnn_target_s: sd, phi: 0.6 },
        None => IbiModel::from_bpm(a.hr),
    };
    let spec = SynthSpec {
        hr_bpm: a.hr,
        ibi_model: Some(model),
        pulse_amp_frac: a.amp,
        noise_sigma: a.noise,
        fps: a.fps,
        duration_s: duration,
        seed: a.seed,
        shape: if a.sinusoid { PulseShape::Sinusoid } else { PulseShape::RaisedCosine },
        ..SynthSpec::default()
    };
    let rec = Recording::new(spec).map_err(anyhow::Error::from)?;
    fs::create_dir_all(&a.out)?;
    let per = (a.segment_s * a.fps).round() as usize;
    let margin = a.size / 10;
    let bbox = BBox { x: margin, y: margin, w: a.size - 2 * margin, h: a.size - 2 * margin };
    let label = |i: usize| -> Option<String> {
        a.conditions.as_ref().map(|c| c.get(i).or(c.last()).cloned().unwrap_or_else(|| DEFAULT_CONDITION.into()))
    };
    let manifest = Manifest {
        fps: a.fps,
        width: a.size,
        height: a.size,
        segments: (0..a.segments).map(|i| ManifestSegment { start_frame: i * per, bbox, condition: label(i) }).collect(),
        recording_id: Some(format!("synth-{}", a.seed)),
        ecg_fs: None,
    };
    match a.format {
        SynthFormat::Frames => {
            let layout = FaceLayout::face(a.size, a.size, bbox);
            for i in 0..a.segments {
                write_frames(&a.out, i * per, &rec.frames(&layout, i * per, per)?)?;
            }
        }
        SynthFormat::Traces => {
            let sets = (0..a.segments).map(|i| rec.traces(i, i * per, per)).collect::<Result<Vec<_>, _>>()?;
            write_traces_csv(&sets, BufWriter::new(File::create(a.out.join("traces.csv"))?))?;
        }
    }
    manifest.write(&a.out.join("manifest.json"))?;
    let ecg = rec.ecg(&EcgSpec { seed: a.seed, ..EcgSpec::default() }, 0.0, duration);
    write_ecg_csv(&ecg.series()?, BufWriter::new(File::create(a.out.join("ecg.csv"))?))?;
    let mut w = BufWriter::new(File::create(a.out.join("truth_peaks.csv"))?);
    writeln!(w, "t_s")?;
    for t in &rec.truth(0.0, duration).times_s {
        writeln!(w, "{t}")?;
    }
    println!("wrote {} segments to {}", a.segments, a.out.display());
    Ok(())
}

fn cmd_pulse(args: &RunArgs) -> anyhow::Result<()> {
    let c = args.config()?;
    let out = out_dir(&c)?;
    let src = open_source(&c)?;
    let sd = c.sd_hz.unwrap_or(rppg_core::enhance::FALLBACK_SD_HZ);
    let sp = src.fixed_sp().map_or(c.sp_counts.clone(), |k| vec![k]);
    let mut w = csv_writer(&out.join("pulse.csv"))?;
    w.write_record(["segment_id", "sp_count", "region_id", "method", "t_s", "raw", "bandpassed"])?;
    for &k in &sp {
        for i in 0..src.segments().len() {
            let set = src.traces(i, k)?;
            for region in &set.regions {
                for &m in &c.methods {
                    let Ok(p) = extract_pulse(&set, region, m) else { continue };
                    let Ok((_, bp)) = condition_pulse(&p.series, sd) else { continue };
                    for (j, (raw, b)) in p.samples().iter().zip(bp.samples()).enumerate() {
                        w.write_record([
                            set.segment_id.to_string(),
                            k.to_string(),
                            region.region_id.to_string(),
                            m.to_string(),
                            p.series.time_at(j).to_string(),
                            raw.to_string(),
                            b.to_string(),
                        ])?;
                    }
                }
            }
        }
    }
    w.flush()?;
    println!("wrote {}", out.join("pulse.csv").display());
    Ok(())
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

fn print_summary(report: &RunReport) {
    println!("{:<36} {:>6} {:>8} {:>8} {:>7} {:>8}", "condition/method/enhancement/sp", "region", "PR MAE", "PR RMSE", "F1(s)", "rejected");
    for e in &report.evaluations {
        let label = format!("{}/{}/{}/sp{}", e.condition, e.method, e.enhancement, e.sp_count);
        let region = e.selected_region.map_or("-".into(), |r| r.to_string());
        let (mae, rmse) = e.pr.map_or(("-".into(), "-".into()), |a| (format!("{:.3}", a.mae), format!("{:.3}", a.rmse)));
        let f1 = e.ibi.get("strict").map_or("-".into(), |s| format!("{:.3}", s.f1));
        println!("{label:<36} {region:>6} {mae:>8} {rmse:>8} {f1:>7} {:>8}", e.n_rejected);
    }
    for d in &report.diagnostics {
        eprintln!("note: {d}");
    }
}

fn cmd_analyze(args: &RunArgs) -> anyhow::Result<()> {
    let c = args.config()?;
    let out = out_dir(&c)?;
    let src = open_source(&c)?;
    let run = run_pipeline(&c, src.as_ref())?;
    write_outputs(&run, &out)?;
    let plots = emit_plots(&run.report, &out.join("plots"))?;
    if let Some(w) = plots.warning {
        eprintln!("warning: {w}");
    }
    print_summary(&run.report);
    Ok(())
}

fn read_report(path: &Path) -> anyhow::Result<RunReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?)
}

fn cmd_evaluate(a: &EvaluateArgs) -> anyhow::Result<()> {
    let report = read_report(&a.report)?;
    if report.evaluations.iter().all(|e| e.selected_region.is_none()) {
        return Err(Error::EmptyReport("report has no evaluated region".into()).into());
    }
    print_summary(&report);
    let mut cells = Vec::new();
    for e in &report.evaluations {
        for s in &e.stats {
            let key = (e.method, e.enhancement.label(), e.sp_count, s.label.clone(), s.metric.clone());
            if !cells.iter().any(|(k, _)| *k == key) {
                cells.push((key, s.clone()));
            }
        }
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("stats.csv"))?);
        writeln!(w, "method,enhancement,sp_count,source,metric,n_bsl,n_ds,test,statistic,p_value,effect,effect_value,skipped")?;
        for ((m, e, sp, label, metric), s) in &cells {
            let (test, stat, p, eff, effv) = match s.result {
                Some(r) => (
                    serde_json::to_value(r.test)?.as_str().unwrap_or("").to_string(),
                    r.statistic.to_string(),
                    r.p_value.to_string(),
                    r.effect.map_or(String::new(), |e| match e {
                        rppg_core::evaluate::Effect::CohensD(_) => "cohens_d".into(),
                        rppg_core::evaluate::Effect::CliffsDelta(_) => "cliffs_delta".into(),
                    }),
                    r.effect.map_or(String::new(), |e| e.value().to_string()),
                ),
                None => Default::default(),
            };
            writeln!(
                w,
                "{m},{e},{sp},{label},{metric},{},{},{test},{stat},{p},{eff},{effv},{}",
                s.n_bsl,
                s.n_ds,
                s.skipped.clone().unwrap_or_default().replace(',', ";")
            )?;
        }
        w.flush()?;
        println!("wrote {}", dir.join("stats.csv").display());
    }
    Ok(())
}

fn cmd_sweep(args: &RunArgs) -> anyhow::Result<()> {
    let c = args.config()?;
    let out = out_dir(&c)?;
    let src = open_source(&c)?;
    let sps = src.fixed_sp().map_or(c.sp_counts.clone(), |k| vec![k]);
    for &k in &sps {
        for &m in &c.methods {
            let segs = sweep_inputs(&c, src.as_ref(), m, k)?;
            for (op, name) in [(rppg_core::enhance::Operator::Glfod, "glfod"), (rppg_core::enhance::Operator::LpNorm, "lpnorm")] {
                let res = rppg_core::enhance::sweep(&segs, &grid_for(op), c.execution())?;
                let stem = format!("sweep_{name}_{}_sp{k}", m.name());
                emit_sweep(&res, &out, &stem)?;
                let b = res.best_point();
                println!("{m} sp{k} {name}: best {} MAE {:.3} bpm over {} segments", b.enhancement, b.mae_bpm, b.n_segments);
            }
        }
    }
    Ok(())
}

fn cmd_plot(a: &PlotArgs) -> anyhow::Result<()> {
    let report = read_report(&a.report)?;
    let p = emit_plots(&report, &a.out)?;
    match p.warning {
        Some(w) => eprintln!("warning: {w}"),
        None => println!("wrote {} files to {}", p.files.len(), a.out.display()),
    }
    Ok(())
}

fn cmd_bench(args: &RunArgs) -> anyhow::Result<()> {
    let c = args.config()?;
    let src = open_source(&c)?;
    let t = measure_runtime(&c, src.as_ref())?;
    if let Some(dir) = &c.out_dir {
        fs::create_dir_all(dir)?;
        t.write_csv(BufWriter::new(File::create(dir.join("timings.csv"))?))?;
    }
    for (k, mean, total) in &t.per_sp {
        println!("sp {k}: {mean:.4} s per segment, {total:.3} s total");
    }
    if let Some(r) = t.ratio {
        println!("largest/smallest SP time ratio: {r:.3}");
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::EmptyReport(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.cmd {
        Command::Extract(a) => cmd_extract(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Pulse(a) => cmd_pulse(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Plot(a) => cmd_plot(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
