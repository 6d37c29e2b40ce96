//! Threshold-free evaluation: ROC, AUC, standardized partial AUC and the
//! worst-ID AUC, plus histogram/ROC exports and SVG renderings.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{AsdError, Result};

/// Above this many normal/anomaly pairs AUC switches from exact pair
/// counting to ROC integration.
pub const PAIR_LIMIT: usize = 1_000_000;

fn check(normal: &[f64], anomaly: &[f64]) -> Result<()> {
    if normal.is_empty() || anomaly.is_empty() {
        return Err(AsdError::Metric(format!(
            "AUC needs both classes, got {} normal and {} anomalous scores",
            normal.len(),
            anomaly.len()
        )));
    }
    if normal.iter().chain(anomaly).any(|s| !s.is_finite()) {
        return Err(AsdError::Metric("scores must be finite".into()));
    }
    Ok(())
}

/// Mann-Whitney statistic by exhaustive pair counting; ties earn half credit.
pub fn auc_pairs(normal: &[f64], anomaly: &[f64]) -> Result<f64> {
    check(normal, anomaly)?;
    let mut credit = 0.0;
    for &a in anomaly {
        for &n in normal {
            if a > n {
                credit += 1.0;
            } else if a == n {
                credit += 0.5;
            }
        }
    }
    Ok(credit / (normal.len() * anomaly.len()) as f64)
}

/// ROC vertices `(fpr, tpr)` from (0,0) to (1,1), one vertex per distinct
/// score threshold. Tied scores move FPR and TPR together.
pub fn roc_curve(normal: &[f64], anomaly: &[f64]) -> Result<Vec<(f64, f64)>> {
    check(normal, anomaly)?;
    let mut all: Vec<(f64, bool)> = normal
        .iter()
        .map(|&s| (s, false))
        .chain(anomaly.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (n, m) = (normal.len() as f64, anomaly.len() as f64);
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut curve = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push((fp as f64 / n, tp as f64 / m));
    }
    Ok(curve)
}

/// Trapezoidal area under the ROC curve.
pub fn auc_roc(normal: &[f64], anomaly: &[f64]) -> Result<f64> {
    let curve = roc_curve(normal, anomaly)?;
    Ok(curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum())
}

pub fn auc(normal: &[f64], anomaly: &[f64]) -> Result<f64> {
    if normal.len().saturating_mul(anomaly.len()) <= PAIR_LIMIT {
        auc_pairs(normal, anomaly)
    } else {
        auc_roc(normal, anomaly)
    }
}

/// Partial ROC area over FPR in `[0, p]`, McClish-standardized to
/// `0.5 * (1 + (A - p^2/2) / (p - p^2/2))`.
pub fn pauc(normal: &[f64], anomaly: &[f64], p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(AsdError::Metric(format!("max FPR must be in (0, 1], got {p}")));
    }
    let curve = roc_curve(normal, anomaly)?;
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= p {
            break;
        }
        let (xe, ye) = if x1 > p {
            (p, y0 + (y1 - y0) * (p - x0) / (x1 - x0))
        } else {
            (x1, y1)
        };
        area += (xe - x0) * (y0 + ye) / 2.0;
    }
    let a_min = p * p / 2.0;
    let a_max = p;
    Ok(0.5 * (1.0 + (area - a_min) / (a_max - a_min)))
}

/// Scores of one machine ID, split by ground truth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreGroup {
    pub name: String,
    pub normal: Vec<f64>,
    pub anomaly: Vec<f64>,
}

/// Minimum per-group AUC.
pub fn mauc(groups: &[ScoreGroup]) -> Result<f64> {
    if groups.is_empty() {
        return Err(AsdError::Metric("mAUC needs at least one group".into()));
    }
    let mut worst = f64::INFINITY;
    for g in groups {
        let a = auc(&g.normal, &g.anomaly)
            .map_err(|e| AsdError::Metric(format!("group {}: {e}", g.name)))?;
        worst = worst.min(a);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// Bin edges in normalized score units; `counts_*.len() + 1` entries.
    pub edges: Vec<f64>,
    pub normal: Vec<usize>,
    pub anomaly: Vec<usize>,
    pub note: Option<String>,
}

/// Per-class histogram of min-max normalized scores. The last bin is
/// closed on the right so the maximum lands in it.
pub fn histogram(normal: &[f64], anomaly: &[f64], bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(AsdError::Metric(format!("histogram needs >= 2 bins, got {bins}")));
    }
    let all = normal.iter().chain(anomaly);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(AsdError::Metric("histogram needs finite scores".into()));
    }
    if lo == hi {
        return Ok(Histogram {
            edges: vec![0.0, 1.0],
            normal: vec![normal.len()],
            anomaly: vec![anomaly.len()],
            note: Some(format!("all scores equal {lo}; single bin")),
        });
    }
    let bin_of = |s: f64| (((s - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
    let mut hn = vec![0; bins];
    let mut ha = vec![0; bins];
    normal.iter().for_each(|&s| hn[bin_of(s)] += 1);
    anomaly.iter().for_each(|&s| ha[bin_of(s)] += 1);
    Ok(Histogram {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        normal: hn,
        anomaly: ha,
        note: None,
    })
}

/// Min-max normalizes `scores` to [0, 1]; a constant input maps to zeros.
pub fn min_max_normalize(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; scores.len()]
    }
}

pub fn export_histogram(path: &Path, group: &str, hist: &Histogram) -> Result<()> {
    write_histograms(path, &[(group.to_string(), hist.clone())])
}

/// One CSV holding several histograms: `group,bin_lo,bin_hi,normal,anomaly,note`.
pub fn write_histograms(path: &Path, hists: &[(String, Histogram)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["group", "bin_lo", "bin_hi", "normal", "anomaly", "note"])?;
    for (group, h) in hists {
        for i in 0..h.normal.len() {
            w.write_record([
                group.clone(),
                h.edges[i].to_string(),
                h.edges[i + 1].to_string(),
                h.normal[i].to_string(),
                h.anomaly[i].to_string(),
                h.note.clone().unwrap_or_default(),
            ])?;
        }
    }
    w.flush().map_err(|e| AsdError::io(path, e))
}

pub fn write_roc_csv(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["fpr", "tpr"])?;
    for (f, t) in curve {
        w.write_record([f.to_string(), t.to_string()])?;
    }
    w.flush().map_err(|e| AsdError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub machine_type: String,
    /// A machine ID or `ALL`.
    pub machine_id: String,
    pub metric: &'static str,
    pub value: f64,
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["machine_type", "machine_id", "metric", "value"])?;
    for r in rows {
        w.write_record([r.machine_type.as_str(), r.machine_id.as_str(), r.metric, &r.value.to_string()])?;
    }
    w.flush().map_err(|e| AsdError::io(path, e))
}

const SVG_SIZE: f64 = 360.0;
const SVG_PAD: f64 = 40.0;

fn svg_frame(title: &str, body: &str) -> String {
    let inner = SVG_SIZE - 2.0 * SVG_PAD;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect x=\"{p}\" y=\"{p}\" width=\"{inner}\" height=\"{inner}\" fill=\"none\" stroke=\"#444\"/>\n\
         <text x=\"{p}\" y=\"{t}\">{title}</text>\n{body}</svg>\n",
        s = SVG_SIZE,
        p = SVG_PAD,
        t = SVG_PAD - 10.0,
    )
}

fn to_px(x: f64, y: f64) -> (f64, f64) {
    let inner = SVG_SIZE - 2.0 * SVG_PAD;
    (SVG_PAD + x * inner, SVG_SIZE - SVG_PAD - y * inner)
}

pub fn roc_svg(title: &str, curve: &[(f64, f64)]) -> String {
    let mut pts = String::new();
    for &(f, t) in curve {
        let (x, y) = to_px(f, t);
        let _ = write!(pts, "{x:.2},{y:.2} ");
    }
    let (x0, y0) = to_px(0.0, 0.0);
    let (x1, y1) = to_px(1.0, 1.0);
    let body = format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y1}\" stroke=\"#bbb\" stroke-dasharray=\"4\"/>\n\
         <polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n\
         <text x=\"{}\" y=\"{}\">FPR</text>\n<text x=\"4\" y=\"{}\">TPR</text>\n",
        pts.trim_end(),
        SVG_SIZE / 2.0,
        SVG_SIZE - 10.0,
        SVG_SIZE / 2.0
    );
    svg_frame(title, &body)
}

pub fn histogram_svg(title: &str, hist: &Histogram) -> String {
    let peak = hist.normal.iter().chain(&hist.anomaly).copied().max().unwrap_or(1).max(1) as f64;
    let bins = hist.normal.len();
    let mut body = String::new();
    for (counts, color, shift) in [(&hist.normal, "#2ca02c", 0.0), (&hist.anomaly, "#d62728", 0.5)] {
        for (i, &c) in counts.iter().enumerate() {
            let x_lo = (i as f64 + shift) / bins as f64;
            let (x, y) = to_px(x_lo, c as f64 / peak);
            let (x_end, base) = to_px(x_lo + 0.5 / bins as f64, 0.0);
            let _ = writeln!(
                body,
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{color}\" opacity=\"0.8\"/>",
                x_end - x,
                base - y
            );
        }
    }
    let _ = write!(
        body,
        "<text x=\"{}\" y=\"{}\" fill=\"#2ca02c\">normal</text>\n<text x=\"{}\" y=\"{}\" fill=\"#d62728\">anomaly</text>\n",
        SVG_PAD,
        SVG_SIZE - 10.0,
        SVG_PAD + 60.0,
        SVG_SIZE - 10.0
    );
    svg_frame(title, &body)
}
