use std::path::Path;

use crate::error::{AsdError, Result};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a 16 kHz mono 16-bit PCM file, scaling samples by 1/32768.
/// Anything else is rejected rather than converted.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let audio_err = |reason: String| AsdError::Audio {
        path: path.to_path_buf(),
        reason,
    };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => AsdError::io(path, io),
        other => audio_err(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(audio_err(format!(
            "expected 16-bit PCM, found {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    if spec.channels != 1 {
        return Err(audio_err(format!("expected mono, found {} channels", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(audio_err(format!(
            "expected {SAMPLE_RATE} Hz, found {} Hz (resampling is not supported)",
            spec.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| audio_err(e.to_string()))?;
    Ok(AudioClip {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Writes samples as 16 kHz mono 16-bit PCM, clamping to the i16 range.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => AsdError::io(path, io),
        other => AsdError::Audio {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, rate: u32, channels: u16, values: &[i16]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &v in values {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn ten_second_clip_has_160000_samples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw(&p, 16_000, 1, &vec![0; 160_000]);
        let clip = read_wav(&p).unwrap();
        assert_eq!(clip.samples.len(), 160_000);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
        assert_eq!(clip.duration_s(), 10.0);
    }

    #[test]
    fn extreme_sample_scales_to_minus_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw(&p, 16_000, 1, &[-32768, 16384, 32767]);
        let s = read_wav(&p).unwrap().samples;
        assert_eq!(s[0], -1.0);
        assert_eq!(s[1], 0.5);
        assert_eq!(s[2], 32767.0 / 32768.0);
    }

    #[test]
    fn wrong_rate_and_channels_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        write_raw(&p, 44_100, 1, &[0; 10]);
        let msg = read_wav(&p).unwrap_err().to_string();
        assert!(msg.contains("44100"), "{msg}");
        let q = dir.path().join("c.wav");
        write_raw(&q, 16_000, 2, &[0; 10]);
        assert!(read_wav(&q).unwrap_err().to_string().contains("mono"));
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.wav");
        let x: Vec<f64> = (0..100).map(|i| ((i as f64) * 0.1).sin() * 0.5).collect();
        write_wav(&p, &x).unwrap();
        let back = read_wav(&p).unwrap().samples;
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-12);
        }
    }
}
