use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::corpus::Condition;
use super::wav::{write_wav, AudioClip, SAMPLE_RATE};
use crate::error::{AsdError, Result};
use crate::kv::{parse_bool, parse_list, parse_value, render_list, KvDoc};

/// Spectral identity of one synthetic machine.
#[derive(Debug, Clone, PartialEq)]
pub struct IdProfile {
    pub f0: f64,
    /// Amplitude of harmonic h (1-based) at index h-1.
    pub harmonics: Vec<f64>,
    /// Standard deviation of the additive white Gaussian noise.
    pub noise_floor: f64,
}

impl IdProfile {
    /// Default profile for ID `i`: f0 = 110 + 70·i Hz, harmonics up to
    /// 7.6 kHz with a power-law decay that steepens with the ID, summed
    /// amplitude 0.4.
    pub fn default_for(i: usize) -> Self {
        let f0 = 110.0 + 70.0 * i as f64;
        let count = ((7600.0 / f0).floor() as usize).max(1);
        let decay = 0.6 + 0.2 * (i % 4) as f64;
        let raw: Vec<f64> = (1..=count).map(|h| (h as f64).powf(-decay)).collect();
        let total: f64 = raw.iter().sum();
        Self {
            f0,
            harmonics: raw.iter().map(|a| 0.4 * a / total).collect(),
            noise_floor: 0.002,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyKind {
    /// Band-limited noise burst at a random onset.
    TransientBurst,
    /// Fundamental shifted upward from mid-clip on.
    Detune,
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnomalyKind::TransientBurst => "transient_burst",
            AnomalyKind::Detune => "detune",
        })
    }
}

impl FromStr for AnomalyKind {
    type Err = AsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transient_burst" => Ok(AnomalyKind::TransientBurst),
            "detune" => Ok(AnomalyKind::Detune),
            _ => Err(AsdError::Config(format!(
                "anomaly_kind must be transient_burst or detune, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub machine_type: String,
    pub num_ids: usize,
    pub train_clips_per_id: usize,
    pub test_normal_per_id: usize,
    pub test_anomaly_per_id: usize,
    pub duration_s: f64,
    pub profiles: Vec<IdProfile>,
    pub anomaly_kind: AnomalyKind,
    pub anomaly_duration_s: f64,
    /// RMS level of the transient burst.
    pub burst_level: f64,
    pub burst_low_hz: f64,
    pub burst_high_hz: f64,
    pub detune_ratio: f64,
    /// Random per-clip harmonic phases; off gives zero phases.
    pub random_phase: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::with_ids(4)
    }
}

/// Shortest clip that still yields a full window plus margin at the default
/// front-end settings: n_fft · (frames + 2) / sample_rate.
const MIN_DURATION_S: f64 = 1024.0 * 7.0 / 16000.0;

const SCALAR_KEYS: [&str; 14] = [
    "machine_type",
    "num_ids",
    "train_clips_per_id",
    "test_normal_per_id",
    "test_anomaly_per_id",
    "duration_s",
    "anomaly_kind",
    "anomaly_duration_s",
    "burst_level",
    "burst_low_hz",
    "burst_high_hz",
    "detune_ratio",
    "random_phase",
    "seed",
];

impl SynthSpec {
    pub fn with_ids(num_ids: usize) -> Self {
        Self {
            machine_type: "synth".into(),
            num_ids,
            train_clips_per_id: 60,
            test_normal_per_id: 20,
            test_anomaly_per_id: 20,
            duration_s: 6.0,
            profiles: (0..num_ids).map(IdProfile::default_for).collect(),
            anomaly_kind: AnomalyKind::TransientBurst,
            anomaly_duration_s: 0.05,
            burst_level: 0.03,
            burst_low_hz: 1000.0,
            burst_high_hz: 4000.0,
            detune_ratio: 1.07,
            random_phase: true,
            seed: 0,
        }
    }

    pub fn samples(&self) -> usize {
        (self.duration_s * SAMPLE_RATE as f64).round() as usize
    }

    pub fn id_label(i: usize) -> String {
        format!("id_{i:02}")
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(AsdError::Config(m));
        if self.num_ids == 0 {
            return err("num_ids must be >= 1".into());
        }
        if self.profiles.len() != self.num_ids {
            return err(format!("{} profiles for {} ids", self.profiles.len(), self.num_ids));
        }
        if self.duration_s < MIN_DURATION_S {
            return err(format!("duration_s must be >= {MIN_DURATION_S}, got {}", self.duration_s));
        }
        if !(self.anomaly_duration_s > 0.0 && self.anomaly_duration_s <= self.duration_s) {
            return err(format!(
                "anomaly_duration_s must be in (0, duration_s], got {}",
                self.anomaly_duration_s
            ));
        }
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        if !(0.0 < self.burst_low_hz && self.burst_low_hz < self.burst_high_hz && self.burst_high_hz <= nyquist) {
            return err("burst band must satisfy 0 < low < high <= 8000 Hz".into());
        }
        if self.detune_ratio <= 0.0 {
            return err("detune_ratio must be positive".into());
        }
        for (i, p) in self.profiles.iter().enumerate() {
            if !(p.f0 > 0.0 && p.f0 < nyquist) || p.noise_floor < 0.0 {
                return err(format!("id.{i}: f0 must be in (0, 8000) Hz and noise_floor >= 0"));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::default();
        doc.set("machine_type", self.machine_type.clone());
        doc.set("num_ids", self.num_ids.to_string());
        doc.set("train_clips_per_id", self.train_clips_per_id.to_string());
        doc.set("test_normal_per_id", self.test_normal_per_id.to_string());
        doc.set("test_anomaly_per_id", self.test_anomaly_per_id.to_string());
        doc.set("duration_s", self.duration_s.to_string());
        doc.set("anomaly_kind", self.anomaly_kind.to_string());
        doc.set("anomaly_duration_s", self.anomaly_duration_s.to_string());
        doc.set("burst_level", self.burst_level.to_string());
        doc.set("burst_low_hz", self.burst_low_hz.to_string());
        doc.set("burst_high_hz", self.burst_high_hz.to_string());
        doc.set("detune_ratio", self.detune_ratio.to_string());
        doc.set("random_phase", self.random_phase.to_string());
        doc.set("seed", self.seed.to_string());
        for (i, p) in self.profiles.iter().enumerate() {
            doc.set(&format!("id.{i}.f0"), p.f0.to_string());
            doc.set(&format!("id.{i}.harmonics"), render_list(&p.harmonics));
            doc.set(&format!("id.{i}.noise_floor"), p.noise_floor.to_string());
        }
        doc
    }

    /// Builds a spec from defaults plus `doc`. `num_ids` is applied first so
    /// that per-ID keys override freshly generated default profiles.
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let num_ids = match doc.get("num_ids") {
            Some(v) => parse_value("num_ids", v)?,
            None => 4,
        };
        let mut spec = Self::with_ids(num_ids);
        for (k, v) in &doc.entries {
            let v = v.as_str();
            match k.as_str() {
                "machine_type" => spec.machine_type = v.to_string(),
                "num_ids" => {}
                "train_clips_per_id" => spec.train_clips_per_id = parse_value(k, v)?,
                "test_normal_per_id" => spec.test_normal_per_id = parse_value(k, v)?,
                "test_anomaly_per_id" => spec.test_anomaly_per_id = parse_value(k, v)?,
                "duration_s" => spec.duration_s = parse_value(k, v)?,
                "anomaly_kind" => spec.anomaly_kind = v.parse()?,
                "anomaly_duration_s" => spec.anomaly_duration_s = parse_value(k, v)?,
                "burst_level" => spec.burst_level = parse_value(k, v)?,
                "burst_low_hz" => spec.burst_low_hz = parse_value(k, v)?,
                "burst_high_hz" => spec.burst_high_hz = parse_value(k, v)?,
                "detune_ratio" => spec.detune_ratio = parse_value(k, v)?,
                "random_phase" => spec.random_phase = parse_bool(k, v)?,
                "seed" => spec.seed = parse_value(k, v)?,
                other => {
                    let parts: Vec<&str> = other.split('.').collect();
                    let profile = match parts.as_slice() {
                        ["id", i, _] => i
                            .parse::<usize>()
                            .ok()
                            .and_then(|i| spec.profiles.get_mut(i))
                            .ok_or_else(|| AsdError::Config(format!("{other}: id index out of range")))?,
                        _ => return Err(unknown_key(other)),
                    };
                    match parts[2] {
                        "f0" => profile.f0 = parse_value(k, v)?,
                        "harmonics" => profile.harmonics = parse_list(k, v)?,
                        "noise_floor" => profile.noise_floor = parse_value(k, v)?,
                        _ => return Err(unknown_key(other)),
                    }
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn unknown_key(key: &str) -> AsdError {
    AsdError::Config(format!(
        "unknown synth key {key:?}; expected one of {} or id.<i>.{{f0,harmonics,noise_floor}}",
        SCALAR_KEYS.join(", ")
    ))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of the k-th clip of `(id, condition, test split)` under `base`.
pub fn clip_seed(base: u64, test: bool, id: usize, condition: Condition, k: usize) -> u64 {
    [test as u64, id as u64, condition as u64, k as u64]
        .iter()
        .fold(splitmix(base), |acc, &v| splitmix(acc ^ v))
}

fn band_noise(rng: &mut ChaCha8Rng, len: usize, low_hz: f64, high_hz: f64, rms: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut buf: Vec<Complex64> = (0..len).map(|_| Complex64::new(normal.sample(rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    let sr = SAMPLE_RATE as f64;
    for (k, v) in buf.iter_mut().enumerate() {
        let f = k.min(len - k) as f64 * sr / len as f64;
        if f < low_hz || f > high_hz {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let energy = (out.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    if energy == 0.0 {
        return out;
    }
    out.iter().map(|v| v * rms / energy).collect()
}

/// Generates one clip and, for anomalies, the sample range that carries
/// the anomaly.
pub fn synth_clip_with_span(
    spec: &SynthSpec,
    id_index: usize,
    condition: Condition,
    seed: u64,
) -> Result<(AudioClip, Option<Range<usize>>)> {
    spec.validate()?;
    let profile = spec.profiles.get(id_index).ok_or_else(|| {
        AsdError::Config(format!("id index {id_index} outside 0..{}", spec.num_ids))
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.samples();
    let sr = SAMPLE_RATE as f64;
    let nyquist = sr / 2.0;
    let anomalous = condition == Condition::Anomaly;
    let switch = if anomalous && spec.anomaly_kind == AnomalyKind::Detune { n / 2 } else { n };

    let mut x = vec![0.0; n];
    for (h, &amp) in profile.harmonics.iter().enumerate() {
        let f = profile.f0 * (h + 1) as f64;
        let phase = if spec.random_phase { rng.random::<f64>() * 2.0 * PI } else { 0.0 };
        if f >= nyquist || amp == 0.0 {
            continue;
        }
        let mut z = Complex64::from_polar(1.0, phase);
        let mut w = Complex64::from_polar(1.0, 2.0 * PI * f / sr);
        let shifted = f * spec.detune_ratio;
        for (i, s) in x.iter_mut().enumerate() {
            if i == switch {
                if shifted >= nyquist {
                    break;
                }
                w = Complex64::from_polar(1.0, 2.0 * PI * shifted / sr);
            }
            *s += amp * z.im;
            z *= w;
            if i % 1024 == 1023 {
                z /= z.norm();
            }
        }
    }
    if profile.noise_floor > 0.0 {
        let noise = Normal::new(0.0, profile.noise_floor).unwrap();
        for s in x.iter_mut() {
            *s += noise.sample(&mut rng);
        }
    }
    let span = match (anomalous, spec.anomaly_kind) {
        (false, _) => None,
        (true, AnomalyKind::Detune) => Some(switch..n),
        (true, AnomalyKind::TransientBurst) => {
            let len = ((spec.anomaly_duration_s * sr).round() as usize).clamp(1, n);
            let onset = rng.random_range(0..=n - len);
            let burst = band_noise(&mut rng, len, spec.burst_low_hz, spec.burst_high_hz, spec.burst_level);
            for (s, b) in x[onset..onset + len].iter_mut().zip(&burst) {
                *s += b;
            }
            Some(onset..onset + len)
        }
    };
    Ok((
        AudioClip {
            samples: x,
            sample_rate: SAMPLE_RATE,
        },
        span,
    ))
}

/// Generates one clip; bitwise deterministic in all arguments.
pub fn synth_clip(spec: &SynthSpec, id_index: usize, condition: Condition, seed: u64) -> Result<AudioClip> {
    synth_clip_with_span(spec, id_index, condition, seed).map(|(clip, _)| clip)
}

/// Writes the corpus in DCASE layout under `out/<machine_type>/{train,test}`
/// and returns the written paths in generation order.
pub fn write_synth_corpus(spec: &SynthSpec, out: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    let base = out.join(&spec.machine_type);
    let mut written = Vec::new();
    let plan = [
        ("train", false, Condition::Normal, spec.train_clips_per_id),
        ("test", true, Condition::Normal, spec.test_normal_per_id),
        ("test", true, Condition::Anomaly, spec.test_anomaly_per_id),
    ];
    for (dir, test, condition, count) in plan {
        let dir = base.join(dir);
        fs::create_dir_all(&dir).map_err(|e| AsdError::io(&dir, e))?;
        for id in 0..spec.num_ids {
            for k in 0..count {
                let clip = synth_clip(spec, id, condition, clip_seed(spec.seed, test, id, condition, k))?;
                let path = dir.join(format!("{}_{}_{k:08}.wav", condition, SynthSpec::id_label(id)));
                write_wav(&path, &clip.samples)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
