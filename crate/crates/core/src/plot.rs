//! Plain SVG charts with CSV twins: Bland-Altman scatter, MAE bars and sweep curves.
//!
//! Reference lines carry their exact value in a `data-value` attribute so the
//! numbers can be read back from the SVG.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::enhance::SweepResult;
use crate::error::Result;
use crate::evaluate::Agreement;
use crate::pipeline::{EvaluationReport, RunReport};

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        Self { x: padded_range(xs), y: padded_range(ys) }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }
}

fn padded_range(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.08 * (hi - lo) } else { 0.5_f64.max(lo.abs() * 0.1) };
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open_svg(title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, H - 14.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    s
}

fn axis_ticks(s: &mut String, f: &Frame) {
    for k in 0..=4 {
        let u = k as f64 / 4.0;
        let xv = f.x.0 + u * (f.x.1 - f.x.0);
        let yv = f.y.0 + u * (f.y.1 - f.y.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="10">{:.3}</text>"#, f.px(xv), H - MARGIN + 14.0, xv);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="10">{:.3}</text>"#, MARGIN - 4.0, f.py(yv) + 3.0, yv);
    }
}

/// Bland-Altman scatter of `(estimate, reference)` pairs with bias and 95% limits.
pub fn bland_altman_svg(title: &str, pairs: &[(f64, f64)], a: &Agreement) -> String {
    let means: Vec<f64> = pairs.iter().map(|(e, r)| 0.5 * (e + r)).collect();
    let diffs: Vec<f64> = pairs.iter().map(|(e, r)| e - r).collect();
    let ys = diffs.iter().copied().chain([a.loa_low, a.loa_high, a.bias]);
    let f = Frame::new(means.iter().copied(), ys);
    let mut s = open_svg(title, "mean of estimate and reference", "estimate - reference");
    axis_ticks(&mut s, &f);
    for (class, v, dash) in [("bias", a.bias, ""), ("loa-low", a.loa_low, "6 4"), ("loa-high", a.loa_high, "6 4")] {
        let y = f.py(v);
        let _ = writeln!(
            s,
            r#"<line class="{class}" data-value="{v}" x1="{MARGIN}" x2="{}" y1="{y:.2}" y2="{y:.2}" stroke="firebrick" stroke-dasharray="{dash}"/>"#,
            W - MARGIN
        );
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" font-size="10" fill="firebrick">{class} {v:.3}</text>"#, W - MARGIN + 2.0, y + 3.0);
    }
    for (m, d) in means.iter().zip(&diffs) {
        let _ = writeln!(s, r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3.5" fill="steelblue"/>"#, f.px(*m), f.py(*d));
    }
    s.push_str("</svg>\n");
    s
}

/// Vertical bars, one per `(label, value)`.
pub fn bar_svg(title: &str, ylabel: &str, bars: &[(String, f64)]) -> String {
    let f = Frame::new([0.0, 1.0].into_iter(), bars.iter().map(|b| b.1).chain([0.0]));
    let mut s = open_svg(title, "", ylabel);
    let n = bars.len().max(1) as f64;
    let slot = (W - 2.0 * MARGIN) / n;
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = MARGIN + i as f64 * slot + 0.15 * slot;
        let (y0, y1) = (f.py(0.0), f.py(*v));
        let _ = writeln!(
            s,
            r#"<rect class="bar" data-value="{v}" x="{x:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="steelblue"><title>{}</title></rect>"#,
            y0.min(y1),
            0.7 * slot,
            (y0 - y1).abs(),
            escape(label)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" font-size="9" text-anchor="end" transform="rotate(-45 {:.2} {})">{}</text>"#,
            x + 0.35 * slot,
            H - MARGIN + 12.0,
            x + 0.35 * slot,
            H - MARGIN + 12.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// MAE against the enhancement parameter, one polyline per operator.
pub fn sweep_svg(title: &str, sweep: &SweepResult) -> String {
    let f = Frame::new(sweep.points.iter().map(|p| p.enhancement.param), sweep.points.iter().map(|p| p.mae_bpm));
    let mut s = open_svg(title, "parameter (alpha or p)", "MAE (bpm)");
    axis_ticks(&mut s, &f);
    let mut ops: Vec<_> = sweep.points.iter().map(|p| p.enhancement.op).collect();
    ops.sort();
    ops.dedup();
    for op in ops {
        let pts: Vec<String> = sweep
            .points
            .iter()
            .filter(|p| p.enhancement.op == op)
            .map(|p| format!("{:.2},{:.2}", f.px(p.enhancement.param), f.py(p.mae_bpm)))
            .collect();
        let _ = writeln!(s, r#"<polyline class="curve" data-op="{op}" points="{}" fill="none" stroke="steelblue"/>"#, pts.join(" "));
    }
    let b = sweep.best_point();
    let _ = writeln!(
        s,
        r#"<circle class="best" data-param="{}" data-value="{}" cx="{:.2}" cy="{:.2}" r="5" fill="firebrick"/>"#,
        b.enhancement.param,
        b.mae_bpm,
        f.px(b.enhancement.param),
        f.py(b.mae_bpm)
    );
    s.push_str("</svg>\n");
    s
}

fn eval_label(e: &EvaluationReport) -> String {
    format!("{}/{}/{}/sp{}", e.condition, e.method, e.enhancement, e.sp_count)
}

fn file_stem(e: &EvaluationReport) -> String {
    eval_label(e).replace(['/', ':'], "_")
}

/// Files written by [`emit_plots`], plus a warning when there was nothing to draw.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlotOutput {
    pub files: Vec<PathBuf>,
    pub warning: Option<String>,
}

fn write_file(path: PathBuf, body: &str, out: &mut PlotOutput) -> Result<()> {
    fs::write(&path, body)?;
    out.files.push(path);
    Ok(())
}

/// Bland-Altman SVG/CSV per evaluation with a PR agreement, and MAE bars across evaluations.
pub fn emit_plots(report: &RunReport, dir: &Path) -> Result<PlotOutput> {
    let mut out = PlotOutput::default();
    let drawable: Vec<&EvaluationReport> = report.evaluations.iter().filter(|e| e.pr.is_some()).collect();
    if drawable.is_empty() {
        out.warning = Some("report has no paired PR values; nothing plotted".into());
        return Ok(out);
    }
    fs::create_dir_all(dir)?;
    for e in &drawable {
        let a = e.pr.expect("filtered on pr");
        let pairs: Vec<(usize, f64, f64)> = e.pairs.iter().filter_map(|p| p.pr_ref.map(|r| (p.segment_id, p.pr_est, r))).collect();
        let xy: Vec<(f64, f64)> = pairs.iter().map(|p| (p.1, p.2)).collect();
        let stem = file_stem(e);
        write_file(dir.join(format!("bland_altman_{stem}.svg")), &bland_altman_svg(&eval_label(e), &xy, &a), &mut out)?;
        let mut csv_out = csv::Writer::from_writer(Vec::new());
        csv_out.write_record(["segment_id", "pr_est_bpm", "pr_ref_bpm", "mean_bpm", "diff_bpm"])?;
        for (id, est, r) in &pairs {
            csv_out.write_record([id.to_string(), est.to_string(), r.to_string(), (0.5 * (est + r)).to_string(), (est - r).to_string()])?;
        }
        let bytes = csv_out.into_inner().map_err(|e| crate::Error::Io(e.to_string()))?;
        write_file(dir.join(format!("bland_altman_{stem}.csv")), &String::from_utf8_lossy(&bytes), &mut out)?;
    }
    let bars: Vec<(String, f64)> = drawable.iter().map(|e| (eval_label(e), e.pr.expect("filtered").mae)).collect();
    write_file(dir.join("mae_bars.svg"), &bar_svg("PR MAE", "MAE (bpm)", &bars), &mut out)?;
    let mut body = String::from("label,mae_bpm,rmse_bpm,bias_bpm,loa_low_bpm,loa_high_bpm,n\n");
    for e in &drawable {
        let a = e.pr.expect("filtered");
        let _ = writeln!(body, "{},{},{},{},{},{},{}", eval_label(e), a.mae, a.rmse, a.bias, a.loa_low, a.loa_high, a.n);
    }
    write_file(dir.join("mae_bars.csv"), &body, &mut out)?;
    Ok(out)
}

/// Sweep curve SVG plus its CSV.
pub fn emit_sweep(sweep: &SweepResult, dir: &Path, name: &str) -> Result<PlotOutput> {
    fs::create_dir_all(dir)?;
    let mut out = PlotOutput::default();
    write_file(dir.join(format!("{name}.svg")), &sweep_svg(name, sweep), &mut out)?;
    let path = dir.join(format!("{name}.csv"));
    let mut f = fs::File::create(&path)?;
    sweep.write_csv(&mut f)?;
    f.flush()?;
    out.files.push(path);
    Ok(out)
}
