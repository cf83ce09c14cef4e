//! Beat matching against ECG R-peaks, precision/recall/F1, agreement
//! statistics, and the BSL-versus-DS hypothesis tests.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::beats::PeakTrain;
use crate::error::{Error, Result};

pub const SIGNIFICANCE: f64 = 0.05;
const WINDOW_EPS: f64 = 1e-9;
/// Above this `n * m` the Mann-Whitney p-value uses the normal approximation.
pub const MWU_EXACT_MAX_NM: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Criterion {
    Strict,
    Medium,
    Relaxed,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::Strict, Criterion::Medium, Criterion::Relaxed];

    /// Post-R-peak window in seconds, where one applies.
    pub fn window_s(self) -> Option<f64> {
        match self {
            Criterion::Strict => Some(0.25),
            Criterion::Medium => Some(0.35),
            Criterion::Relaxed => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Strict => "strict",
            Criterion::Medium => "medium",
            Criterion::Relaxed => "relaxed",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Add for MatchCounts {
    type Output = MatchCounts;

    fn add(self, o: MatchCounts) -> MatchCounts {
        MatchCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

impl AddAssign for MatchCounts {
    fn add_assign(&mut self, o: MatchCounts) {
        *self = *self + o;
    }
}

impl std::iter::Sum for MatchCounts {
    fn sum<I: Iterator<Item = MatchCounts>>(iter: I) -> Self {
        iter.fold(MatchCounts::default(), Add::add)
    }
}

/// Classify rPPG peaks per R-R interval `[R_i, R_{i+1})`.
pub fn match_beats(rppg: &PeakTrain, ecg: &PeakTrain, criterion: Criterion) -> Result<MatchCounts> {
    if ecg.len() < 2 {
        return Err(Error::NoIntervals);
    }
    let mut c = MatchCounts::default();
    for w in ecg.times_s.windows(2) {
        let (r0, r1) = (w[0], w[1]);
        let inside: Vec<f64> = rppg.times_s.iter().copied().filter(|t| *t >= r0 && *t < r1).collect();
        match criterion.window_s() {
            Some(win) => {
                let hits = inside.iter().filter(|t| **t > r0 && **t <= r0 + win + WINDOW_EPS).count() as u64;
                let total = inside.len() as u64;
                if hits > 0 {
                    c.tp += 1;
                    c.fp += total - 1;
                } else {
                    c.fn_ += 1;
                    c.fp += total;
                }
            }
            None => match inside.len() {
                0 => c.fn_ += 1,
                1 => c.tp += 1,
                _ => {
                    c.fp += 1;
                    c.fn_ += 1;
                }
            },
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// False when `tp + fp == 0`; precision is then reported as 0.
    pub precision_defined: bool,
    /// False when `tp + fn == 0`; recall is then reported as 0.
    pub recall_defined: bool,
}

pub fn prf1(c: &MatchCounts) -> Prf1 {
    let ratio = |num: u64, den: u64| if den == 0 { (0.0, false) } else { (num as f64 / den as f64, true) };
    let (precision, precision_defined) = ratio(c.tp, c.tp + c.fp);
    let (recall, recall_defined) = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Prf1 { precision, recall, f1, precision_defined, recall_defined }
}

/// Error summary and Bland-Altman limits for paired estimates, `d = est - ref`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub bias: f64,
    pub sd: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

pub fn agreement(est: &[f64], reference: &[f64]) -> Result<Agreement> {
    if est.len() != reference.len() {
        return Err(Error::PairingError(est.len(), reference.len()));
    }
    let n = est.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let d: Vec<f64> = est.iter().zip(reference).map(|(e, r)| e - r).collect();
    let nf = n as f64;
    let bias = d.iter().sum::<f64>() / nf;
    let sd = (d.iter().map(|v| (v - bias) * (v - bias)).sum::<f64>() / (nf - 1.0)).sqrt();
    Ok(Agreement {
        n,
        mae: d.iter().map(|v| v.abs()).sum::<f64>() / nf,
        rmse: (d.iter().map(|v| v * v).sum::<f64>() / nf).sqrt(),
        bias,
        sd,
        loa_low: bias - 1.96 * sd,
        loa_high: bias + 1.96 * sd,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatTest {
    ShapiroWilk,
    TTest,
    MannWhitney,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Effect {
    CohensD(f64),
    CliffsDelta(f64),
}

impl Effect {
    pub fn value(&self) -> f64 {
        match self {
            Effect::CohensD(v) | Effect::CliffsDelta(v) => *v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    pub test: StatTest,
    pub statistic: f64,
    pub p_value: f64,
    pub effect: Option<Effect>,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, v| acc * x + v)
}

/// Shapiro-Wilk W with Royston's (1995) coefficient and p-value approximations.
pub fn shapiro_wilk(x: &[f64]) -> Result<StatResult> {
    const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
    const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
    const C3: [f64; 4] = [0.544, -0.39978, 0.025054, -6.714e-4];
    const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
    const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
    const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
    const G: [f64; 2] = [-2.273, 0.459];

    let n = x.len();
    if !(3..=5000).contains(&n) {
        return Err(Error::UnsupportedN(n));
    }
    let mut xs = x.to_vec();
    xs.sort_by(f64::total_cmp);
    if xs[n - 1] - xs[0] <= 1e-12 * xs[0].abs().max(xs[n - 1].abs()).max(1e-300) {
        return Err(Error::DegenerateSample("all values identical".into()));
    }
    let an = n as f64;
    let nn2 = n / 2;
    let norm = std_normal();

    // Upper-half coefficients a[0..nn2], largest first.
    let mut a = vec![0.0; nn2];
    if n == 3 {
        a[0] = 0.5f64.sqrt();
    } else {
        let m: Vec<f64> = (1..=nn2).map(|i| norm.inverse_cdf((i as f64 - 0.375) / (an + 0.25))).collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / an.sqrt();
        let a1 = poly(&C1, rsn) - m[0] / ssumm2;
        let (i1, fac) = if n > 5 {
            let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
            a[1] = a2;
            (2, ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt())
        } else {
            (1, ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt())
        };
        a[0] = a1;
        for i in i1..nn2 {
            a[i] = -m[i] / fac;
        }
    }

    let mean = xs.iter().sum::<f64>() / an;
    let ss: f64 = xs.iter().map(|v| (v - mean) * (v - mean)).sum();
    let mut num = 0.0;
    let mut asq = 0.0;
    for (i, ai) in a.iter().enumerate() {
        num += ai * (xs[n - 1 - i] - xs[i]);
        asq += 2.0 * ai * ai;
    }
    let w = (num * num / (asq * ss)).min(1.0);

    let p = if n == 3 {
        let pi6 = 6.0 / std::f64::consts::PI;
        let stqr = std::f64::consts::PI / 3.0;
        (pi6 * (w.sqrt().asin() - stqr)).clamp(0.0, 1.0)
    } else {
        let w1 = (1.0 - w).ln();
        if n <= 11 {
            let gamma = poly(&G, an);
            if w1 >= gamma {
                1e-99
            } else {
                let y = -(gamma - w1).ln();
                let m = poly(&C3, an);
                let s = poly(&C4, an).exp();
                1.0 - norm.cdf((y - m) / s)
            }
        } else {
            let xx = an.ln();
            let m = poly(&C5, xx);
            let s = poly(&C6, xx).exp();
            1.0 - norm.cdf((w1 - m) / s)
        }
    };
    Ok(StatResult { test: StatTest::ShapiroWilk, statistic: w, p_value: p.clamp(0.0, 1.0), effect: None })
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0))
}

/// Pooled-variance two-sample t-test, two-sided, with Cohen's d of `a - b`.
pub fn ttest_cohend(a: &[f64], b: &[f64]) -> Result<StatResult> {
    let (n, m) = (a.len(), b.len());
    if n < 2 || m < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n.min(m) });
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let df = (n + m - 2) as f64;
    let sp = (((n - 1) as f64 * va + (m - 1) as f64 * vb) / df).sqrt();
    if !(sp > 0.0) {
        return Err(Error::DegenerateSample("zero pooled variance".into()));
    }
    let t = (ma - mb) / (sp * (1.0 / n as f64 + 1.0 / m as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::DegenerateSample(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(StatResult { test: StatTest::TTest, statistic: t, p_value: p, effect: Some(Effect::CohensD((ma - mb) / sp)) })
}

/// `(#{a_i > b_j} - #{a_i < b_j}) / (n m)`.
pub fn cliffs_delta(a: &[f64], b: &[f64]) -> f64 {
    let mut s: i64 = 0;
    for x in a {
        for y in b {
            s += (x > y) as i64 - (x < y) as i64;
        }
    }
    s as f64 / (a.len() * b.len()) as f64
}

/// Mann-Whitney U of `a`: pairs with `a_i > b_j`, ties counting one half.
pub fn mwu_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in a {
        for y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

/// Doubled mid-ranks of the pooled sample (integers even with ties).
fn doubled_midranks(pooled: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut r = vec![0usize; pooled.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && pooled[idx[e + 1]] == pooled[idx[k]] {
            e += 1;
        }
        // Ranks k+1 ..= e+1 share (k+1 + e+1) / 2; doubled that is k + e + 2.
        for &i in &idx[k..=e] {
            r[i] = k + e + 2;
        }
        k = e + 1;
    }
    r
}

/// Exact two-sided Mann-Whitney p-value, conditional on ties, from the
/// permutation distribution of the rank sum (subset-sum counting).
pub fn mwu_exact_p(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = doubled_midranks(&pooled);
    let max_sum: usize = ranks.iter().sum();
    // ways[k][s]: subsets of size k with doubled rank sum s.
    let mut ways = vec![vec![0f64; max_sum + 1]; n + 1];
    ways[0][0] = 1.0;
    for &r in &ranks {
        for k in (1..=n).rev() {
            for s in (r..=max_sum).rev() {
                let add = ways[k - 1][s - r];
                if add != 0.0 {
                    ways[k][s] += add;
                }
            }
        }
    }
    // Doubled U = doubled rank sum - n(n+1).
    let offset = n * (n + 1);
    let centre = (n * m) as f64;
    let obs_dev = (2.0 * mwu_statistic(a, b) - centre).abs();
    let total: f64 = ways[n].iter().sum();
    let extreme: f64 = ways[n]
        .iter()
        .enumerate()
        .filter(|(s, w)| **w != 0.0 && *s >= offset && ((*s - offset) as f64 - centre).abs() >= obs_dev - 1e-9)
        .map(|(_, w)| w)
        .sum();
    (extreme / total).clamp(0.0, 1.0)
}

/// Normal approximation with tie correction and continuity correction.
pub fn mwu_normal_p(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len() as f64, b.len() as f64);
    let big_n = n + m;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut k = 0;
    while k < sorted.len() {
        let mut e = k;
        while e + 1 < sorted.len() && sorted[e + 1] == sorted[k] {
            e += 1;
        }
        let t = (e - k + 1) as f64;
        tie_term += t * t * t - t;
        k = e + 1;
    }
    let var = n * m / 12.0 * ((big_n + 1.0) - tie_term / (big_n * (big_n - 1.0)));
    if !(var > 0.0) {
        return 1.0;
    }
    let u = mwu_statistic(a, b);
    let z = ((u - n * m / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
    (2.0 * (1.0 - std_normal().cdf(z))).clamp(0.0, 1.0)
}

/// Mann-Whitney U test of `a` against `b` with Cliff's delta of `a` over `b`.
pub fn mwu_cliffs(a: &[f64], b: &[f64]) -> Result<StatResult> {
    let (n, m) = (a.len(), b.len());
    if n < 2 || m < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n.min(m) });
    }
    let p = if n * m <= MWU_EXACT_MAX_NM { mwu_exact_p(a, b) } else { mwu_normal_p(a, b) };
    Ok(StatResult {
        test: StatTest::MannWhitney,
        statistic: mwu_statistic(a, b),
        p_value: p,
        effect: Some(Effect::CliffsDelta(cliffs_delta(a, b))),
    })
}

/// One BSL-vs-DS comparison cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCell {
    pub label: String,
    pub metric: String,
    pub n_bsl: usize,
    pub n_ds: usize,
    /// Both samples passed Shapiro-Wilk at the 0.05 level.
    pub normal: bool,
    pub result: Option<StatResult>,
    pub skipped: Option<String>,
}

impl ComparisonCell {
    pub fn significant(&self) -> bool {
        self.result.is_some_and(|r| r.p_value < SIGNIFICANCE)
    }
}

fn passes_normality(x: &[f64]) -> bool {
    shapiro_wilk(x).is_ok_and(|r| r.p_value >= SIGNIFICANCE)
}

/// Route to the t-test when both conditions look normal, otherwise to
/// Mann-Whitney; effects are DS relative to BSL.
pub fn compare_conditions(label: &str, metric: &str, bsl: &[f64], ds: &[f64]) -> ComparisonCell {
    let mut cell = ComparisonCell {
        label: label.to_string(),
        metric: metric.to_string(),
        n_bsl: bsl.len(),
        n_ds: ds.len(),
        normal: false,
        result: None,
        skipped: None,
    };
    if bsl.len() < 2 || ds.len() < 2 {
        cell.skipped = Some("a condition has fewer than two segments".into());
        return cell;
    }
    cell.normal = passes_normality(bsl) && passes_normality(ds);
    let r = if cell.normal { ttest_cohend(ds, bsl) } else { mwu_cliffs(ds, bsl) };
    match r {
        Ok(r) => cell.result = Some(r),
        Err(e) => cell.skipped = Some(e.to_string()),
    }
    cell
}

/// Per-segment values of one metric under both conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSample {
    pub label: String,
    pub metric: String,
    pub bsl: Vec<f64>,
    pub ds: Vec<f64>,
}

pub fn condition_comparison(samples: &[ConditionSample]) -> Vec<ComparisonCell> {
    samples.iter().map(|s| compare_conditions(&s.label, &s.metric, &s.bsl, &s.ds)).collect()
}
