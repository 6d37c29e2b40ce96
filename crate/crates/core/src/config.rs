//! Flat run configuration covering the front-end, model, training and
//! scoring. Per-machine-type GWRP decay `r` and weight `beta` default to
//! the published per-type settings unless set explicitly.

use std::path::Path;

use crate::dsp::DspConfig;
use crate::error::{AsdError, Result};
use crate::kv::{parse_bool, parse_value, KvDoc};
use crate::model::ModelConfig;
use crate::scorer::ScoreConfig;
use crate::trainer::TrainConfig;

/// `(machine type, r, beta)` per DCASE machine type.
pub const MACHINE_DEFAULTS: [(&str, f64, f64); 6] = [
    ("Fan", 1.00, 0.84),
    ("Pump", 1.00, 0.82),
    ("Slider", 0.96, 0.80),
    ("Valve", 0.92, 0.72),
    ("ToyCar", 1.00, 0.62),
    ("ToyConveyor", 1.00, 0.98),
];

/// `(r, beta)` for machine types outside the DCASE set.
pub const SYNTHETIC_DEFAULTS: (f64, f64) = (0.9, 0.0);

pub fn machine_defaults(machine_type: &str) -> (f64, f64) {
    MACHINE_DEFAULTS
        .iter()
        .find(|(t, _, _)| t.eq_ignore_ascii_case(machine_type))
        .map(|&(_, r, b)| (r, b))
        .unwrap_or(SYNTHETIC_DEFAULTS)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dsp: DspConfig,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub classifier_hidden: usize,
    pub alpha: f64,
    pub train: TrainConfig,
    /// `None` selects the per-machine-type default.
    pub r: Option<f64>,
    pub beta: Option<f64>,
    pub theta: f64,
    pub pauc_p: f64,
    pub hist_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            dsp: DspConfig::default(),
            n_heads: model.n_heads,
            ff_dim: model.ff_dim,
            enc_layers: model.enc_layers,
            dec_layers: model.dec_layers,
            classifier_hidden: model.classifier_hidden,
            alpha: model.alpha,
            train: TrainConfig::default(),
            r: None,
            beta: None,
            theta: f64::INFINITY,
            pauc_p: 0.1,
            hist_bins: 20,
        }
    }
}

fn opt_to_string(v: Option<f64>) -> String {
    v.map_or_else(|| "auto".to_string(), |x| x.to_string())
}

fn parse_opt(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "auto" {
        Ok(None)
    } else {
        parse_value(key, v).map(Some)
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 25] = [
        "sample_rate",
        "n_fft",
        "hop",
        "n_mels",
        "f_min",
        "f_max",
        "frames",
        "n_heads",
        "ff_dim",
        "enc_layers",
        "dec_layers",
        "classifier_hidden",
        "alpha",
        "epochs",
        "batch_size",
        "lr",
        "classifier_period",
        "seed",
        "standardize",
        "windows_per_clip",
        "r",
        "beta",
        "theta",
        "pauc_p",
        "hist_bins",
    ];

    pub fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::default();
        let t = &self.train;
        let pairs: [(&str, String); 25] = [
            ("sample_rate", self.dsp.sample_rate.to_string()),
            ("n_fft", self.dsp.n_fft.to_string()),
            ("hop", self.dsp.hop.to_string()),
            ("n_mels", self.dsp.n_mels.to_string()),
            ("f_min", self.dsp.f_min.to_string()),
            ("f_max", self.dsp.f_max.to_string()),
            ("frames", self.dsp.frames.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("ff_dim", self.ff_dim.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("classifier_hidden", self.classifier_hidden.to_string()),
            ("alpha", self.alpha.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("classifier_period", t.classifier_period.to_string()),
            ("seed", t.seed.to_string()),
            ("standardize", t.standardize.to_string()),
            ("windows_per_clip", t.windows_per_clip.to_string()),
            ("r", opt_to_string(self.r)),
            ("beta", opt_to_string(self.beta)),
            ("theta", self.theta.to_string()),
            ("pauc_p", self.pauc_p.to_string()),
            ("hist_bins", self.hist_bins.to_string()),
        ];
        for (k, v) in pairs {
            d.set(k, v);
        }
        d
    }

    pub fn render(&self) -> String {
        self.to_kv().render()
    }

    /// Applies `key=value` pairs on top of `self`; unknown keys are rejected.
    pub fn apply(&mut self, doc: &KvDoc) -> Result<()> {
        for (k, v) in &doc.entries {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "sample_rate" => self.dsp.sample_rate = parse_value(k, v)?,
                "n_fft" => self.dsp.n_fft = parse_value(k, v)?,
                "hop" => self.dsp.hop = parse_value(k, v)?,
                "n_mels" => self.dsp.n_mels = parse_value(k, v)?,
                "f_min" => self.dsp.f_min = parse_value(k, v)?,
                "f_max" => self.dsp.f_max = parse_value(k, v)?,
                "frames" => self.dsp.frames = parse_value(k, v)?,
                "n_heads" => self.n_heads = parse_value(k, v)?,
                "ff_dim" => self.ff_dim = parse_value(k, v)?,
                "enc_layers" => self.enc_layers = parse_value(k, v)?,
                "dec_layers" => self.dec_layers = parse_value(k, v)?,
                "classifier_hidden" => self.classifier_hidden = parse_value(k, v)?,
                "alpha" => self.alpha = parse_value(k, v)?,
                "epochs" => self.train.epochs = parse_value(k, v)?,
                "batch_size" => self.train.batch_size = parse_value(k, v)?,
                "lr" => self.train.lr = parse_value(k, v)?,
                "classifier_period" => self.train.classifier_period = parse_value(k, v)?,
                "seed" => self.train.seed = parse_value(k, v)?,
                "standardize" => self.train.standardize = parse_bool(k, v)?,
                "windows_per_clip" => self.train.windows_per_clip = parse_value(k, v)?,
                "r" => self.r = parse_opt(k, v)?,
                "beta" => self.beta = parse_opt(k, v)?,
                "theta" => self.theta = parse_value(k, v)?,
                "pauc_p" => self.pauc_p = parse_value(k, v)?,
                "hist_bins" => self.hist_bins = parse_value(k, v)?,
                other => {
                    return Err(AsdError::Config(format!(
                        "unknown configuration key {other:?}; known keys: {}",
                        Self::KEYS.join(", ")
                    )))
                }
            }
        }
        self.train.frames = self.dsp.frames;
        self.validate()
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(doc)?;
        Ok(cfg)
    }

    /// Built-in defaults, then the optional file, then command-line
    /// overrides in order.
    pub fn layered(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            cfg.apply(&KvDoc::load(path)?)?;
        }
        let mut doc = KvDoc::default();
        for (k, v) in overrides {
            doc.set(k, v.clone());
        }
        cfg.apply(&doc)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dsp.validate()?;
        self.train.validate()?;
        if let Some(r) = self.r {
            if !(0.0..=1.0).contains(&r) {
                return Err(AsdError::Config(format!("r must lie in [0, 1], got {r}")));
            }
        }
        if let Some(b) = self.beta {
            if !(0.0..=1.0).contains(&b) {
                return Err(AsdError::Config(format!("beta must lie in [0, 1], got {b}")));
            }
        }
        if !(self.pauc_p > 0.0 && self.pauc_p <= 1.0) {
            return Err(AsdError::Config(format!("pauc_p must lie in (0, 1], got {}", self.pauc_p)));
        }
        if self.hist_bins < 2 {
            return Err(AsdError::Config("hist_bins must be >= 2".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, num_ids: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.dsp.n_mels,
            n_heads: self.n_heads,
            ff_dim: self.ff_dim,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            n_mels: self.dsp.n_mels,
            phase_dim: self.dsp.bins(),
            context_len: self.dsp.frames - 1,
            num_ids,
            alpha: self.alpha,
            classifier_hidden: self.classifier_hidden,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            frames: self.dsp.frames,
            ..self.train.clone()
        }
    }

    pub fn score_config(&self, machine_type: &str) -> ScoreConfig {
        let (r, beta) = machine_defaults(machine_type);
        ScoreConfig {
            r: self.r.unwrap_or(r),
            beta: self.beta.unwrap_or(beta),
            theta: self.theta,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_published_settings() {
        let c = RunConfig::default();
        assert_eq!((c.dsp.n_fft, c.dsp.hop, c.dsp.n_mels, c.dsp.frames), (1024, 512, 128, 5));
        assert_eq!(c.alpha, 0.3);
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.train.classifier_period, 10);
        let valve = c.score_config("valve");
        assert_eq!((valve.r, valve.beta), (0.92, 0.72));
        assert_eq!(machine_defaults("ToyConveyor"), (1.0, 0.98));
        assert_eq!(machine_defaults("Slider"), (0.96, 0.80));
        assert_eq!(machine_defaults("synth"), SYNTHETIC_DEFAULTS);
    }

    #[test]
    fn round_trip_is_lossless() {
        let mut c = RunConfig::default();
        c.r = Some(0.35);
        c.train.lr = 3.3e-5;
        c.theta = 2.5;
        let back = RunConfig::from_kv(&KvDoc::parse(&c.render()).unwrap()).unwrap();
        assert_eq!(back, c);
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_kv(&KvDoc::parse(&d.render()).unwrap()).unwrap(), d);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut doc = KvDoc::default();
        doc.set("learning_rate", "0.1");
        assert!(RunConfig::from_kv(&doc).unwrap_err().to_string().contains("learning_rate"));
        let mut doc = KvDoc::default();
        doc.set("beta", "1.5");
        assert!(RunConfig::from_kv(&doc).is_err());
    }

    #[test]
    fn overrides_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "epochs=7\nseed=3\n").unwrap();
        let c = RunConfig::layered(Some(&path), &[("seed".into(), "9".into())]).unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.seed, 9);
    }
}
