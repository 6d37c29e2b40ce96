//! Clip scoring: per-window center-frame errors, mean/max/GWRP pooling,
//! the weighted combination with the ID-classification loss, and
//! thresholding.

use std::path::Path;

use crate::dataio::Condition;
use crate::dsp::{FeatureClip, FeatureStats, FrameWindow};
use crate::error::{AsdError, Result};
use crate::model::{Batch, Mode, Model};
use crate::numgrad::{Graph, PROB_FLOOR};

/// Per-window reconstruction errors of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSequence {
    pub errors: Vec<f64>,
    pub clip: String,
    pub machine_id: String,
}

impl ErrorSequence {
    pub fn new(errors: Vec<f64>, clip: impl Into<String>, machine_id: impl Into<String>) -> Result<Self> {
        if errors.is_empty() {
            return Err(AsdError::State("error sequence is empty".into()));
        }
        if let Some(bad) = errors.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
            return Err(AsdError::State(format!("invalid window error {bad}")));
        }
        Ok(Self {
            errors,
            clip: clip.into(),
            machine_id: machine_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }
}

pub fn score_mean(e: &[f64]) -> f64 {
    e.iter().sum::<f64>() / e.len() as f64
}

pub fn score_max(e: &[f64]) -> f64 {
    e.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Global weighted rank pooling: errors sorted in descending order are
/// weighted by `r^(i-1)` and normalized by the weight sum. `r = 0` keeps
/// only the largest error (0^0 = 1), `r = 1` is the mean.
pub fn score_gwrp(e: &[f64], r: f64) -> f64 {
    if r == 1.0 {
        // Equal weights; skip the sort so the result is bitwise the mean.
        return score_mean(e);
    }
    let mut sorted = e.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let (mut num, mut den, mut w) = (0.0, 0.0, 1.0);
    for v in sorted {
        if w == 0.0 {
            break;
        }
        num += w * v;
        den += w;
        w *= r;
    }
    num / den
}

pub fn score_weighted(gwrp: f64, loss_c: f64, beta: f64) -> f64 {
    (1.0 - beta) * gwrp + beta * loss_c
}

/// 1 (anomaly) iff `score > theta`.
pub fn decide(score: f64, theta: f64) -> u8 {
    u8::from(score > theta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreConfig {
    pub r: f64,
    pub beta: f64,
    pub theta: f64,
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r) || !(0.0..=1.0).contains(&self.beta) {
            return Err(AsdError::Config(format!(
                "r and beta must lie in [0, 1], got r={} beta={}",
                self.r, self.beta
            )));
        }
        Ok(())
    }
}

/// Everything the scorer extracts from one clip in a single eval pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipAnalysis {
    pub errors: Vec<f64>,
    /// Mean window cross-entropy against the true ID, when one was given.
    pub loss_c: Option<f64>,
    /// Mean classifier distribution over windows.
    pub mean_probs: Vec<f64>,
}

const SCORE_BATCH: usize = 512;

/// Runs the frozen model over every stride-1 window of `clip`.
pub fn analyze_clip(
    model: &Model,
    stats: &FeatureStats,
    clip: &FeatureClip,
    frames: usize,
    true_id: Option<usize>,
    with_classifier: bool,
) -> Result<ClipAnalysis> {
    let count = clip.window_count(frames, 1);
    if count == 0 {
        return Err(AsdError::ClipTooShort {
            frames: clip.frames(),
            needed: frames,
            unit: "frames",
        });
    }
    let k = model.config.num_ids;
    if let Some(id) = true_id {
        if id >= k {
            return Err(AsdError::Config(format!("machine id index {id} outside the {k}-ID vocabulary")));
        }
    }
    let m = clip.logmel.mel_bins;
    let mut errors = Vec::with_capacity(count);
    let mut ce_sum = 0.0;
    let mut mean_probs = vec![0.0; if with_classifier { k } else { 0 }];
    for start in (0..count).step_by(SCORE_BATCH) {
        let windows: Vec<FrameWindow> = (start..(start + SCORE_BATCH).min(count))
            .map(|o| {
                let mut w = clip.window(o, frames);
                stats.apply_window(&mut w);
                w
            })
            .collect();
        let refs: Vec<&FrameWindow> = windows.iter().collect();
        let batch = Batch::from_windows(&refs, None, k)?;
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &batch, Mode::Eval, with_classifier)?;
        let pred = g.value(fwd.center).data();
        for (p, t) in pred.chunks(m).zip(batch.target.data().chunks(m)) {
            errors.push(p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / m as f64);
        }
        if let Some(probs) = fwd.probs {
            for row in g.value(probs).data().chunks(k) {
                for (acc, p) in mean_probs.iter_mut().zip(row) {
                    *acc += p / count as f64;
                }
                if let Some(id) = true_id {
                    ce_sum -= row[id].max(PROB_FLOOR).ln();
                }
            }
        }
    }
    Ok(ClipAnalysis {
        errors,
        loss_c: (with_classifier && true_id.is_some()).then(|| ce_sum / count as f64),
        mean_probs,
    })
}

/// `e_i = ||target_i - prediction_i||^2 / M` for every stride-1 window, in
/// the standardized feature space.
pub fn segment_errors(model: &Model, stats: &FeatureStats, clip: &FeatureClip, frames: usize) -> Result<Vec<f64>> {
    Ok(analyze_clip(model, stats, clip, frames, None, false)?.errors)
}

/// Mean window cross-entropy of the ID classifier against `true_id`.
pub fn clip_classification_loss(
    model: &Model,
    stats: &FeatureStats,
    clip: &FeatureClip,
    frames: usize,
    true_id: usize,
) -> Result<f64> {
    Ok(analyze_clip(model, stats, clip, frames, Some(true_id), true)?
        .loss_c
        .expect("classifier ran"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub clip_path: String,
    pub machine_type: String,
    pub machine_id: String,
    pub label: Condition,
    pub windows: usize,
    pub score_mean: f64,
    pub score_max: f64,
    pub score_gwrp: f64,
    pub loss_c: f64,
    pub score_weighted: f64,
}

impl ScoreRecord {
    pub fn from_errors(
        clip_path: String,
        machine_type: String,
        machine_id: String,
        label: Condition,
        errors: &[f64],
        loss_c: f64,
        config: &ScoreConfig,
    ) -> Self {
        let gwrp = score_gwrp(errors, config.r);
        Self {
            clip_path,
            machine_type,
            machine_id,
            label,
            windows: errors.len(),
            score_mean: score_mean(errors),
            score_max: score_max(errors),
            score_gwrp: gwrp,
            loss_c,
            score_weighted: score_weighted(gwrp, loss_c, config.beta),
        }
    }
}

const SCORE_HEADER: [&str; 10] = [
    "clip_path",
    "machine_type",
    "machine_id",
    "label",
    "I",
    "score_mean",
    "score_max",
    "score_gwrp",
    "loss_c",
    "score_weighted",
];

pub fn write_scores_csv(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SCORE_HEADER)?;
    for r in records {
        w.write_record([
            r.clip_path.clone(),
            r.machine_type.clone(),
            r.machine_id.clone(),
            r.label.to_string(),
            r.windows.to_string(),
            r.score_mean.to_string(),
            r.score_max.to_string(),
            r.score_gwrp.to_string(),
            r.loss_c.to_string(),
            r.score_weighted.to_string(),
        ])?;
    }
    w.flush().map_err(|e| AsdError::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    if header != SCORE_HEADER {
        return Err(AsdError::Format {
            what: "score CSV",
            reason: format!("unexpected header {header:?}"),
        });
    }
    let num = |v: &str| -> Result<f64> {
        v.parse().map_err(|_| AsdError::Format {
            what: "score CSV",
            reason: format!("bad number {v:?}"),
        })
    };
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        out.push(ScoreRecord {
            clip_path: row[0].to_string(),
            machine_type: row[1].to_string(),
            machine_id: row[2].to_string(),
            label: row[3].parse()?,
            windows: row[4].parse().map_err(|_| AsdError::Format {
                what: "score CSV",
                reason: format!("bad window count {:?}", &row[4]),
            })?,
            score_mean: num(&row[5])?,
            score_max: num(&row[6])?,
            score_gwrp: num(&row[7])?,
            loss_c: num(&row[8])?,
            score_weighted: num(&row[9])?,
        });
    }
    Ok(out)
}

/// Writes per-clip error sequences as `clip_path,errors` with `;`-joined values.
pub fn write_errors_csv(path: &Path, sequences: &[ErrorSequence]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["clip_path", "machine_id", "errors"])?;
    for s in sequences {
        let joined = s.errors.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
        w.write_record([s.clip.as_str(), s.machine_id.as_str(), joined.as_str()])?;
    }
    w.flush().map_err(|e| AsdError::io(path, e))
}

pub fn read_errors_csv(path: &Path) -> Result<Vec<ErrorSequence>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let errors = row[2]
            .split(';')
            .map(|v| {
                v.parse::<f64>().map_err(|_| AsdError::Format {
                    what: "error CSV",
                    reason: format!("bad number {v:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ErrorSequence::new(errors, &row[0], &row[1])?);
    }
    Ok(out)
}
