//! Joint training loop with the alternating schedule: every
//! `classifier_period`-th epoch optimizes the joint loss over all parameters,
//! the remaining epochs optimize reconstruction only and never touch the ID
//! classifier.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{FeatureClip, FeatureStats, FrameWindow};
use crate::error::{AsdError, Result};
use crate::model::{Batch, Model, ModelConfig, Mode};
use crate::numgrad::{Adam, Graph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub classifier_period: usize,
    pub seed: u64,
    pub standardize: bool,
    /// Windows sampled per clip each epoch; 0 uses every window.
    pub windows_per_clip: usize,
    /// Frames per window, center included.
    pub frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            lr: 1e-4,
            classifier_period: 10,
            seed: 0,
            standardize: true,
            windows_per_clip: 8,
            frames: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classifier_period == 0 || self.batch_size == 0 {
            return Err(AsdError::Config("classifier_period and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AsdError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.frames < 3 || self.frames % 2 == 0 {
            return Err(AsdError::Config(format!("frames must be odd and >= 3, got {}", self.frames)));
        }
        Ok(())
    }

    /// Whether 1-based `epoch` optimizes the joint loss.
    pub fn is_joint_epoch(&self, epoch: usize) -> bool {
        epoch % self.classifier_period == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpochMode {
    Joint,
    ReconOnly,
}

impl fmt::Display for EpochMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EpochMode::Joint => "joint",
            EpochMode::ReconOnly => "recon-only",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: EpochMode,
    pub loss_r: f64,
    /// `None` on reconstruction-only epochs.
    pub loss_c: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,mode,loss_r,loss_c,seconds\n");
        for e in &self.epochs {
            let lc = e.loss_c.map(|v| format!("{v:.9}")).unwrap_or_default();
            out.push_str(&format!("{},{},{:.9},{},{:.3}\n", e.epoch, e.mode, e.loss_r, lc, e.seconds));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| AsdError::io(path, e))
    }
}

/// Training clips of one machine type with their machine-ID class indices.
#[derive(Debug, Clone, Default)]
pub struct TrainSet {
    pub clips: Vec<FeatureClip>,
    pub labels: Vec<usize>,
}

impl TrainSet {
    pub fn push(&mut self, clip: FeatureClip, label: usize) {
        self.clips.push(clip);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// `(clip, offset)` pairs of every window at the given stride.
    pub fn window_index(&self, n: usize, stride: usize) -> Vec<(usize, usize)> {
        self.clips
            .iter()
            .enumerate()
            .flat_map(|(c, clip)| (0..clip.window_count(n, stride)).map(move |i| (c, i * stride)))
            .collect()
    }

    pub fn window(&self, clip: usize, offset: usize, n: usize, stats: &FeatureStats) -> FrameWindow {
        let mut w = self.clips[clip].window(offset, n);
        stats.apply_window(&mut w);
        w
    }

    pub fn batch(
        &self,
        items: &[(usize, usize)],
        n: usize,
        stats: &FeatureStats,
        num_ids: usize,
    ) -> Result<Batch> {
        let windows: Vec<FrameWindow> = items.iter().map(|&(c, o)| self.window(c, o, n, stats)).collect();
        let refs: Vec<&FrameWindow> = windows.iter().collect();
        let labels: Vec<usize> = items.iter().map(|&(c, _)| self.labels[c]).collect();
        Batch::from_windows(&refs, Some(&labels), num_ids)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub stats: FeatureStats,
    pub log: TrainLog,
}

/// Trains a fresh model on `train_set`.
pub fn fit(train_set: &TrainSet, model_config: ModelConfig, config: &TrainConfig) -> Result<TrainedModel> {
    fit_with_callback(train_set, model_config, config, |_, _| Ok(()))
}

/// As [`fit`], calling `on_epoch` after every epoch with the model state.
pub fn fit_with_callback<F>(
    train_set: &TrainSet,
    model_config: ModelConfig,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainedModel>
where
    F: FnMut(&EpochRecord, &Model) -> Result<()>,
{
    config.validate()?;
    if train_set.is_empty() {
        return Err(AsdError::State("training set is empty".into()));
    }
    if model_config.num_ids < 2 && model_config.alpha > 0.0 {
        return Err(AsdError::Config(format!(
            "alpha > 0 needs at least 2 machine IDs, got {}",
            model_config.num_ids
        )));
    }
    if let Some(&bad) = train_set.labels.iter().find(|&&l| l >= model_config.num_ids) {
        return Err(AsdError::Config(format!(
            "label {bad} outside the {}-ID vocabulary",
            model_config.num_ids
        )));
    }
    let n = config.frames;
    if model_config.context_len != n - 1 {
        return Err(AsdError::Config(format!(
            "model context_len {} does not match {} frames per window",
            model_config.context_len, n
        )));
    }
    let stats = if config.standardize {
        FeatureStats::from_clips(&train_set.clips)?
    } else {
        FeatureStats::identity(train_set.clips[0].logmel.mel_bins)
    };
    let mut model = Model::new(model_config, config.seed)?;
    let mut adam = Adam::new(config.lr);
    let counts: Vec<usize> = train_set.clips.iter().map(|c| c.window_count(n, 1)).collect();
    if counts.iter().all(|&c| c == 0) {
        return Err(AsdError::ClipTooShort {
            frames: train_set.clips.iter().map(FeatureClip::frames).max().unwrap_or(0),
            needed: n,
            unit: "frames",
        });
    }
    // With alpha = 0 the classifier has no influence on the objective, so
    // every epoch is reconstruction-only.
    let classifier_active = model.config.alpha > 0.0;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_ba7c);
    let mut log = TrainLog::default();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let joint = classifier_active && config.is_joint_epoch(epoch);
        let windows = sample_windows(&counts, config.windows_per_clip, &mut shuffle_rng);
        let (mut sum_r, mut sum_c, mut seen) = (0.0, 0.0, 0usize);
        for items in windows.chunks(config.batch_size) {
            let batch = train_set.batch(items, n, &stats, model.config.num_ids)?;
            let step = train_step(&mut model, &mut adam, &batch, joint)?;
            sum_r += step.loss_r * items.len() as f64;
            sum_c += step.loss_c.unwrap_or(0.0) * items.len() as f64;
            seen += items.len();
        }
        let record = EpochRecord {
            epoch,
            mode: if joint { EpochMode::Joint } else { EpochMode::ReconOnly },
            loss_r: sum_r / seen as f64,
            loss_c: joint.then(|| sum_c / seen as f64),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch:>4} {:<10} L_r {:.5} L_c {}",
            record.mode,
            record.loss_r,
            record.loss_c.map_or("-".to_string(), |v| format!("{v:.5}"))
        );
        on_epoch(&record, &model)?;
        log.epochs.push(record);
    }
    Ok(TrainedModel { model, stats, log })
}

/// Shuffled `(clip, offset)` pairs for one epoch: `per_clip` stride-1
/// offsets drawn without replacement from each clip, or all of them when
/// `per_clip` is 0 or exceeds the clip's window count.
pub fn sample_windows<R: Rng>(counts: &[usize], per_clip: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (c, &count) in counts.iter().enumerate() {
        if per_clip == 0 || per_clip >= count {
            out.extend((0..count).map(|o| (c, o)));
        } else {
            out.extend(index::sample(rng, count, per_clip).into_iter().map(|o| (c, o)));
        }
    }
    out.shuffle(rng);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub loss_r: f64,
    pub loss_c: Option<f64>,
}

/// One optimizer step on `batch`. Joint steps optimize the weighted total
/// over all parameters; otherwise only L_r is built and classifier
/// parameters are left untouched.
pub fn train_step(model: &mut Model, adam: &mut Adam, batch: &Batch, joint: bool) -> Result<StepLoss> {
    let mut g = Graph::new();
    let (loss, fwd) = model.batch_loss(&mut g, batch, Mode::Train, joint)?;
    let out = StepLoss {
        loss_r: g.value(loss.loss_r).item(),
        loss_c: loss.loss_c.map(|v| g.value(v).item()),
    };
    g.backward(loss.total)?;
    model.store.zero_grads();
    g.accumulate_param_grads(&mut model.store);
    let classifier: Vec<bool> = model.store.ids().map(|id| model.is_classifier_param(id)).collect();
    adam.step(&mut model.store, |id| joint || !classifier[id.0]);
    model.update_running_stats(&fwd.bn_stats);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss_r: f64,
    pub loss_c: f64,
    pub accuracy: f64,
}

/// Eval-mode losses and window-level ID accuracy; does not mutate the model.
pub fn evaluate_epoch(
    model: &Model,
    stats: &FeatureStats,
    data: &TrainSet,
    frames: usize,
    stride: usize,
    batch_size: usize,
) -> Result<EvalMetrics> {
    let index = data.window_index(frames, stride);
    if index.is_empty() {
        return Err(AsdError::State("no validation windows".into()));
    }
    let k = model.config.num_ids;
    let (mut sum_r, mut sum_c, mut correct) = (0.0, 0.0, 0usize);
    for items in index.chunks(batch_size.max(1)) {
        let batch = data.batch(items, frames, stats, k)?;
        let mut g = Graph::new();
        let (loss, fwd) = model.batch_loss(&mut g, &batch, Mode::Eval, true)?;
        sum_r += g.value(loss.loss_r).item() * items.len() as f64;
        sum_c += g.value(loss.loss_c.unwrap()).item() * items.len() as f64;
        let probs = g.value(fwd.probs.unwrap()).data();
        for (row, &(c, _)) in probs.chunks(k).zip(items) {
            if argmax(row) == data.labels[c] {
                correct += 1;
            }
        }
    }
    let n = index.len() as f64;
    Ok(EvalMetrics {
        loss_r: sum_r / n,
        loss_c: sum_c / n,
        accuracy: correct as f64 / n,
    })
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{LogMelSpectrogram, PhaseFrames};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn joint_epochs_follow_the_period() {
        let cfg = TrainConfig { epochs: 30, ..TrainConfig::default() };
        let joint: Vec<usize> = (1..=cfg.epochs).filter(|&e| cfg.is_joint_epoch(e)).collect();
        assert_eq!(joint, vec![10, 20, 30]);
        let ten = TrainConfig { epochs: 10, ..TrainConfig::default() };
        assert_eq!((1..=ten.epochs).filter(|&e| ten.is_joint_epoch(e)).count(), 1);
    }

    #[test]
    fn empty_train_set_is_rejected() {
        let err = fit(&TrainSet::default(), ModelConfig::default(), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, AsdError::State(_)), "{err}");
    }

    #[test]
    fn single_id_with_alpha_is_a_config_error() {
        let clip = FeatureClip::new(
            LogMelSpectrogram { frames: 6, mel_bins: 128, data: vec![0.0; 6 * 128] },
            PhaseFrames { frames: 6, bins: 513, data: vec![0.0; 6 * 513] },
        )
        .unwrap();
        let mut set = TrainSet::default();
        set.push(clip, 0);
        let cfg = ModelConfig { num_ids: 1, ..ModelConfig::default() };
        let err = fit(&set, cfg, &TrainConfig { epochs: 1, ..TrainConfig::default() }).unwrap_err();
        assert!(matches!(err, AsdError::Config(_)), "{err}");
    }

    #[test]
    fn sampled_windows_cover_requested_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let idx = sample_windows(&[10, 3, 0], 4, &mut rng);
        assert_eq!(idx.iter().filter(|w| w.0 == 0).count(), 4);
        assert_eq!(idx.iter().filter(|w| w.0 == 1).count(), 3);
        assert!(idx.iter().all(|&(c, o)| o < [10, 3, 0][c]));
        let mut seen: Vec<_> = idx.iter().filter(|w| w.0 == 0).map(|w| w.1).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 4);
        assert_eq!(sample_windows(&[5, 2], 0, &mut rng).len(), 7);
    }

    #[test]
    fn argmax_prefers_lowest_tie() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5, 0.1]), 1);
    }

    #[test]
    fn train_log_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let log = TrainLog {
            epochs: vec![
                EpochRecord { epoch: 1, mode: EpochMode::ReconOnly, loss_r: 2.0, loss_c: None, seconds: 0.5 },
                EpochRecord { epoch: 2, mode: EpochMode::Joint, loss_r: 1.0, loss_c: Some(0.25), seconds: 0.5 },
            ],
        };
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,mode,loss_r,loss_c,seconds");
        assert_eq!(lines[1], "1,recon-only,2.000000000,,0.500");
        assert_eq!(lines[2], "2,joint,1.000000000,0.250000000,0.500");
    }
}
