//! Audio front-end: STFT, mel filterbank, log-Mel and phase features, and
//! center-frame-removed windowing.
//!
//! Frames are not center-padded, so a waveform of `L >= n_fft` samples
//! yields exactly `(L - n_fft) / hop + 1` frames.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{AsdError, Result};

/// Floor added to mel power before taking the log.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Frames per model window, center frame included.
    pub frames: usize,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 1024,
            hop: 512,
            n_mels: 128,
            f_min: 0.0,
            f_max: 8000.0,
            frames: 5,
        }
    }
}

impl DspConfig {
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !self.n_fft.is_power_of_two() || self.n_fft < 4 {
            return Err(AsdError::Config(format!(
                "n_fft must be a power of two >= 4, got {}",
                self.n_fft
            )));
        }
        if self.hop == 0 {
            return Err(AsdError::Config("hop must be positive".into()));
        }
        if self.frames < 3 || self.frames % 2 == 0 {
            return Err(AsdError::Config(format!(
                "frames must be odd and >= 3, got {}",
                self.frames
            )));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(AsdError::Config(format!(
                "need 0 <= f_min < f_max <= {nyquist}, got f_min={} f_max={}",
                self.f_min, self.f_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub frames: usize,
    pub bins: usize,
    /// Row-major `frames x bins`.
    pub data: Vec<Complex64>,
}

impl ComplexSpectrogram {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub frames: usize,
    pub mel_bins: usize,
    pub data: Vec<f32>,
}

impl LogMelSpectrogram {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.mel_bins..(t + 1) * self.mel_bins]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseFrames {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f32>,
}

impl PhaseFrames {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }
}

/// Log-Mel spectrogram paired with the phase frames of the same clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureClip {
    pub logmel: LogMelSpectrogram,
    pub phase: PhaseFrames,
}

impl FeatureClip {
    pub fn new(logmel: LogMelSpectrogram, phase: PhaseFrames) -> Result<Self> {
        if logmel.frames != phase.frames {
            return Err(AsdError::shape(
                "feature clip",
                &[logmel.frames, logmel.mel_bins],
                &[phase.frames, phase.bins],
            ));
        }
        Ok(Self { logmel, phase })
    }

    pub fn frames(&self) -> usize {
        self.logmel.frames
    }

    /// Number of windows of `n` frames at the given stride.
    pub fn window_count(&self, n: usize, stride: usize) -> usize {
        window_count(self.frames(), n, stride)
    }

    /// Builds the window starting at frame `offset` (0-based).
    pub fn window(&self, offset: usize, n: usize) -> FrameWindow {
        let mel = self.logmel.mel_bins;
        let bins = self.phase.bins;
        let center = offset + n / 2;
        let mut context = Vec::with_capacity((n - 1) * mel);
        let mut phase_context = Vec::with_capacity((n - 1) * bins);
        for t in offset..offset + n {
            if t == center {
                continue;
            }
            context.extend(self.logmel.frame(t).iter().map(|&v| v as f64));
            phase_context.extend(self.phase.frame(t).iter().map(|&v| v as f64));
        }
        FrameWindow {
            context,
            phase_context,
            center_target: self.logmel.frame(center).iter().map(|&v| v as f64).collect(),
            clip_index: offset,
        }
    }
}

/// One model input: `n - 1` context frames with the center frame held out.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWindow {
    /// Row-major `(n - 1) x n_mels`.
    pub context: Vec<f64>,
    /// Row-major `(n - 1) x phase_bins`.
    pub phase_context: Vec<f64>,
    pub center_target: Vec<f64>,
    /// Offset of the window's first frame within its clip.
    pub clip_index: usize,
}

impl FrameWindow {
    pub fn context_len(&self) -> usize {
        self.context.len() / self.center_target.len()
    }
}

pub fn frame_count(samples: usize, n_fft: usize, hop: usize) -> usize {
    if samples < n_fft {
        0
    } else {
        (samples - n_fft) / hop + 1
    }
}

pub fn window_count(frames: usize, n: usize, stride: usize) -> usize {
    if frames < n {
        0
    } else {
        (frames - n) / stride + 1
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn stft(waveform: &[f64], n_fft: usize, hop: usize) -> Result<ComplexSpectrogram> {
    if !n_fft.is_power_of_two() || hop == 0 {
        return Err(AsdError::Config(format!(
            "stft needs power-of-two n_fft and positive hop, got n_fft={n_fft} hop={hop}"
        )));
    }
    if waveform.len() < n_fft {
        return Err(AsdError::ClipTooShort {
            frames: waveform.len(),
            needed: n_fft,
            unit: "samples",
        });
    }
    let frames = frame_count(waveform.len(), n_fft, hop);
    let bins = n_fft / 2 + 1;
    let window = hann(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex64::default(); n_fft];
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    let mut data = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let chunk = &waveform[t * hop..t * hop + n_fft];
        for ((b, &x), &w) in buf.iter_mut().zip(chunk).zip(&window) {
            *b = Complex64::new(x * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(ComplexSpectrogram { frames, bins, data })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub bins: usize,
    /// Row-major `n_mels x bins`.
    pub weights: Vec<f64>,
    /// Center frequency of each filter in Hz.
    pub centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }
}

/// Triangular HTK-mel filters with band edges equally spaced in mel.
pub fn mel_filterbank(
    n_fft: usize,
    n_mels: usize,
    sample_rate: u32,
    f_min: f64,
    f_max: f64,
) -> Result<MelFilterbank> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(0.0 <= f_min && f_min < f_max && f_max <= nyquist) || n_mels == 0 {
        return Err(AsdError::Config(format!(
            "invalid mel band: f_min={f_min} f_max={f_max} n_mels={n_mels} sr={sample_rate}"
        )));
    }
    let bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut weights = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * bins..(m + 1) * bins];
        for (b, w) in row.iter_mut().enumerate() {
            let f = b as f64 * bin_hz;
            let rise = (f - left) / (center - left);
            let fall = (right - f) / (right - center);
            *w = rise.min(fall).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(AsdError::Config(format!(
                "mel filter {m} ({left:.1}-{right:.1} Hz) has no FFT bin support; \
                 reduce n_mels or increase n_fft"
            )));
        }
    }
    Ok(MelFilterbank {
        n_mels,
        bins,
        weights,
        centers: edges[1..=n_mels].to_vec(),
    })
}

pub fn log_mel(spec: &ComplexSpectrogram, fb: &MelFilterbank) -> Result<LogMelSpectrogram> {
    if fb.bins != spec.bins {
        return Err(AsdError::shape(
            "log_mel",
            &[fb.n_mels, fb.bins],
            &[spec.frames, spec.bins],
        ));
    }
    let mut power = vec![0.0; spec.bins];
    let mut data = Vec::with_capacity(spec.frames * fb.n_mels);
    for t in 0..spec.frames {
        for (p, c) in power.iter_mut().zip(spec.frame(t)) {
            *p = c.norm_sqr();
        }
        for m in 0..fb.n_mels {
            let e: f64 = fb.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            data.push((10.0 * (e + LOG_EPS).log10()) as f32);
        }
    }
    Ok(LogMelSpectrogram {
        frames: spec.frames,
        mel_bins: fb.n_mels,
        data,
    })
}

pub fn phase_angles(spec: &ComplexSpectrogram) -> PhaseFrames {
    PhaseFrames {
        frames: spec.frames,
        bins: spec.bins,
        data: spec.data.iter().map(|c| c.im.atan2(c.re) as f32).collect(),
    }
}

/// Slices a clip into windows of `n` frames, holding out each window's
/// center frame as the prediction target.
pub fn window_frames(
    logmel: &LogMelSpectrogram,
    phase: &PhaseFrames,
    n: usize,
    stride: usize,
) -> Result<Vec<FrameWindow>> {
    if n % 2 == 0 || stride == 0 {
        return Err(AsdError::Config(format!(
            "window length must be odd and stride positive, got n={n} stride={stride}"
        )));
    }
    if phase.frames != logmel.frames {
        return Err(AsdError::shape(
            "window_frames",
            &[logmel.frames, logmel.mel_bins],
            &[phase.frames, phase.bins],
        ));
    }
    if logmel.frames < n {
        return Err(AsdError::ClipTooShort {
            frames: logmel.frames,
            needed: n,
            unit: "frames",
        });
    }
    let clip = FeatureClip {
        logmel: logmel.clone(),
        phase: phase.clone(),
    };
    Ok((0..window_count(logmel.frames, n, stride))
        .map(|i| clip.window(i * stride, n))
        .collect())
}

/// Reusable featurizer holding the filterbank for one configuration.
#[derive(Debug, Clone)]
pub struct Featurizer {
    pub config: DspConfig,
    filterbank: MelFilterbank,
}

impl Featurizer {
    pub fn new(config: DspConfig) -> Result<Self> {
        config.validate()?;
        let filterbank = mel_filterbank(
            config.n_fft,
            config.n_mels,
            config.sample_rate,
            config.f_min,
            config.f_max,
        )?;
        Ok(Self { config, filterbank })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn featurize(&self, waveform: &[f64]) -> Result<FeatureClip> {
        let spec = stft(waveform, self.config.n_fft, self.config.hop)?;
        let logmel = log_mel(&spec, &self.filterbank)?;
        let phase = phase_angles(&spec);
        FeatureClip::new(logmel, phase)
    }
}

/// Per-dimension log-Mel mean and standard deviation over a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    const STD_FLOOR: f64 = 1e-3;

    pub fn identity(dims: usize) -> Self {
        Self {
            mean: vec![0.0; dims],
            std: vec![1.0; dims],
        }
    }

    pub fn from_clips<'a>(clips: impl IntoIterator<Item = &'a FeatureClip>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for clip in clips {
            let mel = clip.logmel.mel_bins;
            if sum.is_empty() {
                sum = vec![0.0; mel];
                sq = vec![0.0; mel];
            } else if sum.len() != mel {
                return Err(AsdError::shape("feature stats", &[sum.len()], &[mel]));
            }
            for t in 0..clip.frames() {
                for (d, &v) in clip.logmel.frame(t).iter().enumerate() {
                    let v = v as f64;
                    sum[d] += v;
                    sq[d] += v * v;
                }
            }
            count += clip.frames();
        }
        if count == 0 {
            return Err(AsdError::State("cannot compute statistics of an empty set".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(Self::STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    /// Standardizes a row-major block whose rows have `dims()` columns.
    pub fn apply(&self, rows: &mut [f64]) {
        let d = self.dims();
        for row in rows.chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }

    pub fn apply_window(&self, w: &mut FrameWindow) {
        self.apply(&mut w.context);
        self.apply(&mut w.center_target);
    }
}

const CACHE_MAGIC: &[u8; 4] = b"ASDF";
const CACHE_VERSION: u32 = 1;

/// Little-endian feature cache: magic, version, frames, mel, phase_bins,
/// then the log-Mel block and the phase block as row-major f32.
pub fn write_feature_cache(path: &Path, clip: &FeatureClip) -> Result<()> {
    let mut out = Vec::with_capacity(20 + 4 * (clip.logmel.data.len() + clip.phase.data.len()));
    out.extend_from_slice(CACHE_MAGIC);
    for v in [
        CACHE_VERSION,
        clip.frames() as u32,
        clip.logmel.mel_bins as u32,
        clip.phase.bins as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in clip.logmel.data.iter().chain(&clip.phase.data) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| AsdError::io(path, e))?;
    f.write_all(&out).map_err(|e| AsdError::io(path, e))
}

pub fn read_feature_cache(path: &Path) -> Result<FeatureClip> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| AsdError::io(path, e))?;
    let bad = |reason: String| AsdError::Format {
        what: "feature cache",
        reason,
    };
    if bytes.len() < 20 || &bytes[..4] != CACHE_MAGIC {
        return Err(bad(format!("{} lacks the ASDF header", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != CACHE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (frames, mel, bins) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let expected = 20 + 4 * frames * (mel + bins);
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes for {frames}x({mel}+{bins}), found {}",
            bytes.len()
        )));
    }
    let floats: Vec<f32> = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (lm, ph) = floats.split_at(frames * mel);
    FeatureClip::new(
        LogMelSpectrogram {
            frames,
            mel_bins: mel,
            data: lm.to_vec(),
        },
        PhaseFrames {
            frames,
            bins,
            data: ph.to_vec(),
        },
    )
}
