//! Python bindings: feature extraction, GWRP scoring, metrics, trained
//! models and the corpus-level pipeline steps.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use asd_core::config::RunConfig;
use asd_core::dataio::{read_wav as core_read_wav, synth_clip as core_synth_clip, Condition, SynthSpec};
use asd_core::dsp::{FeatureStats, Featurizer};
use asd_core::kv::KvDoc;
use asd_core::metrics::{self, ScoreGroup};
use asd_core::model::Model as CoreModel;
use asd_core::pipeline::{self, Sidecar};
use asd_core::scorer;
use asd_core::AsdError;

fn to_py(e: AsdError) -> PyErr {
    match e {
        AsdError::Config(_) | AsdError::Metric(_) | AsdError::Shape { .. } | AsdError::ClipTooShort { .. } => {
            PyValueError::new_err(e.to_string())
        }
        AsdError::Io { .. } | AsdError::Audio { .. } => PyIOError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn pairs(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    if let Some(d) = overrides {
        for (k, v) in d.iter() {
            out.push((k.str()?.to_string(), v.str()?.to_string()));
        }
    }
    Ok(out)
}

fn run_config(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<RunConfig> {
    RunConfig::layered(None, &pairs(overrides)?).map_err(to_py)
}

fn synth_spec(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<SynthSpec> {
    let mut doc = KvDoc::default();
    for (k, v) in pairs(overrides)? {
        doc.set(&k, v);
    }
    SynthSpec::from_kv(&doc).map_err(to_py)
}

fn rows(data: &[f32], width: usize) -> Vec<Vec<f32>> {
    data.chunks(width).map(<[f32]>::to_vec).collect()
}

/// Samples of a 16 kHz mono 16-bit WAV file, scaled to [-1, 1).
#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<Vec<f64>> {
    Ok(core_read_wav(&path).map_err(to_py)?.samples)
}

/// One synthetic clip of machine ID `id_index`.
#[pyfunction]
#[pyo3(signature = (id_index, anomaly=false, seed=0, overrides=None))]
fn synth_clip(id_index: usize, anomaly: bool, seed: u64, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<f64>> {
    let spec = synth_spec(overrides)?;
    let condition = if anomaly { Condition::Anomaly } else { Condition::Normal };
    Ok(core_synth_clip(&spec, id_index, condition, seed).map_err(to_py)?.samples)
}

/// `(log_mel, phase)` frame lists of a waveform.
#[pyfunction]
#[pyo3(signature = (samples, overrides=None))]
fn featurize(samples: Vec<f64>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let cfg = run_config(overrides)?;
    let clip = Featurizer::new(cfg.dsp).and_then(|f| f.featurize(&samples)).map_err(to_py)?;
    Ok((rows(&clip.logmel.data, clip.logmel.mel_bins), rows(&clip.phase.data, clip.phase.bins)))
}

fn non_empty(e: &[f64]) -> PyResult<()> {
    if e.is_empty() {
        Err(PyValueError::new_err("error sequence is empty"))
    } else {
        Ok(())
    }
}

#[pyfunction]
fn score_mean(errors: Vec<f64>) -> PyResult<f64> {
    non_empty(&errors)?;
    Ok(scorer::score_mean(&errors))
}

#[pyfunction]
fn score_max(errors: Vec<f64>) -> PyResult<f64> {
    non_empty(&errors)?;
    Ok(scorer::score_max(&errors))
}

#[pyfunction]
fn score_gwrp(errors: Vec<f64>, r: f64) -> PyResult<f64> {
    non_empty(&errors)?;
    if !(0.0..=1.0).contains(&r) {
        return Err(PyValueError::new_err(format!("r must lie in [0, 1], got {r}")));
    }
    Ok(scorer::score_gwrp(&errors, r))
}

#[pyfunction]
fn score_weighted(gwrp: f64, loss_c: f64, beta: f64) -> f64 {
    scorer::score_weighted(gwrp, loss_c, beta)
}

#[pyfunction]
fn auc(normal: Vec<f64>, anomaly: Vec<f64>) -> PyResult<f64> {
    metrics::auc(&normal, &anomaly).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (normal, anomaly, p=0.1))]
fn pauc(normal: Vec<f64>, anomaly: Vec<f64>, p: f64) -> PyResult<f64> {
    metrics::pauc(&normal, &anomaly, p).map_err(to_py)
}

/// Minimum AUC over `(name, normal_scores, anomaly_scores)` groups.
#[pyfunction]
fn mauc(groups: Vec<(String, Vec<f64>, Vec<f64>)>) -> PyResult<f64> {
    let groups: Vec<ScoreGroup> = groups
        .into_iter()
        .map(|(name, normal, anomaly)| ScoreGroup { name, normal, anomaly })
        .collect();
    metrics::mauc(&groups).map_err(to_py)
}

/// A trained model loaded from a `train` output directory.
#[pyclass(module = "asd_py")]
struct Model {
    model: CoreModel,
    stats: FeatureStats,
    sidecar: Sidecar,
    featurizer: Featurizer,
}

impl Model {
    fn analyze(&self, samples: &[f64], true_id: Option<usize>) -> PyResult<scorer::ClipAnalysis> {
        let clip = self.featurizer.featurize(samples).map_err(to_py)?;
        scorer::analyze_clip(&self.model, &self.stats, &clip, self.sidecar.dsp.frames, true_id, true).map_err(to_py)
    }

    fn id_index(&self, machine_id: &str) -> PyResult<usize> {
        self.sidecar
            .ids
            .iter()
            .position(|i| i == machine_id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown machine id {machine_id:?}; known: {:?}", self.sidecar.ids)))
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(model_dir: PathBuf) -> PyResult<Self> {
        let (model, stats, sidecar) = pipeline::load_model(&model_dir).map_err(to_py)?;
        let featurizer = Featurizer::new(sidecar.dsp.clone()).map_err(to_py)?;
        Ok(Self {
            model,
            stats,
            sidecar,
            featurizer,
        })
    }

    #[getter]
    fn machine_type(&self) -> String {
        self.sidecar.machine_type.clone()
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.sidecar.ids.clone()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.model.store.parameter_count()
    }

    /// Per-window reconstruction errors of a waveform.
    fn errors(&self, samples: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.analyze(&samples, None)?.errors)
    }

    /// Mean classifier distribution over the clip's windows.
    fn id_probabilities(&self, samples: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.analyze(&samples, None)?.mean_probs)
    }

    /// Anomaly score `(1 - beta) * gwrp_r(errors) + beta * loss_c`.
    /// `r` and `beta` default to the machine type's settings.
    #[pyo3(signature = (samples, machine_id, r=None, beta=None))]
    fn score(&self, samples: Vec<f64>, machine_id: &str, r: Option<f64>, beta: Option<f64>) -> PyResult<f64> {
        let defaults = RunConfig::default().score_config(&self.sidecar.machine_type);
        let cfg = scorer::ScoreConfig {
            r: r.unwrap_or(defaults.r),
            beta: beta.unwrap_or(defaults.beta),
            theta: defaults.theta,
        };
        cfg.validate().map_err(to_py)?;
        let analysis = self.analyze(&samples, Some(self.id_index(machine_id)?))?;
        let loss_c = analysis.loss_c.expect("classifier ran");
        Ok(scorer::score_weighted(scorer::score_gwrp(&analysis.errors, cfg.r), loss_c, cfg.beta))
    }
}

fn cache_or_default(corpus: &Path, cache: Option<PathBuf>) -> PathBuf {
    cache.unwrap_or_else(|| pipeline::default_cache_dir(corpus))
}

/// Writes a synthetic corpus; returns the number of clips.
#[pyfunction]
#[pyo3(signature = (out, overrides=None))]
fn synth(out: PathBuf, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<usize> {
    let spec = synth_spec(overrides)?;
    Ok(pipeline::run_synth(&spec, &out).map_err(to_py)?.len())
}

/// Caches features for a corpus; returns `(computed, reused)`.
#[pyfunction]
#[pyo3(signature = (corpus, cache=None, overrides=None))]
fn featurize_corpus(corpus: PathBuf, cache: Option<PathBuf>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<(usize, usize)> {
    let cfg = run_config(overrides)?;
    let cache = cache_or_default(&corpus, cache);
    let report = pipeline::run_featurize(&corpus, &cache, &cfg).map_err(to_py)?;
    Ok((report.computed, report.reused))
}

/// Trains a model; returns the per-epoch `(epoch, mode, loss_r, loss_c)` log.
#[pyfunction]
#[pyo3(signature = (corpus, out, machine_type=None, cache=None, overrides=None))]
fn train(
    corpus: PathBuf,
    out: PathBuf,
    machine_type: Option<String>,
    cache: Option<PathBuf>,
    overrides: Option<&Bound<'_, PyDict>>,
) -> PyResult<Vec<(usize, String, f64, Option<f64>)>> {
    let cfg = run_config(overrides)?;
    let cache = cache_or_default(&corpus, cache);
    let outcome =
        pipeline::run_train(&corpus, machine_type.as_deref(), &cfg, &cache, &out, |_, _| Ok(())).map_err(to_py)?;
    Ok(outcome
        .trained
        .log
        .epochs
        .iter()
        .map(|e| (e.epoch, e.mode.to_string(), e.loss_r, e.loss_c))
        .collect())
}

/// Scores the test split and writes the score CSV; returns the ID accuracy
/// on normal clips.
#[pyfunction]
#[pyo3(signature = (model, corpus, out, cache=None, overrides=None))]
fn score(
    model: PathBuf,
    corpus: PathBuf,
    out: PathBuf,
    cache: Option<PathBuf>,
    overrides: Option<&Bound<'_, PyDict>>,
) -> PyResult<f64> {
    let cfg = run_config(overrides)?;
    let cache = cache_or_default(&corpus, cache);
    let scored = pipeline::run_score(&model, &corpus, &cfg, &cache).map_err(to_py)?;
    pipeline::write_score_output(&scored, &out).map_err(to_py)?;
    Ok(scored.id_accuracy)
}

/// Writes the evaluation report; returns `(machine_type, machine_id, metric, value)` rows.
#[pyfunction]
#[pyo3(signature = (scores, out, overrides=None))]
fn evaluate(
    scores: PathBuf,
    out: PathBuf,
    overrides: Option<&Bound<'_, PyDict>>,
) -> PyResult<Vec<(String, String, String, f64)>> {
    let cfg = run_config(overrides)?;
    let result = pipeline::run_eval(&scores, &cfg, &out).map_err(to_py)?;
    Ok(result
        .rows
        .into_iter()
        .map(|r| (r.machine_type, r.machine_id, r.metric.to_string(), r.value))
        .collect())
}

#[pymodule]
fn asd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    for f in [
        wrap_pyfunction!(read_wav, m)?,
        wrap_pyfunction!(synth_clip, m)?,
        wrap_pyfunction!(featurize, m)?,
        wrap_pyfunction!(score_mean, m)?,
        wrap_pyfunction!(score_max, m)?,
        wrap_pyfunction!(score_gwrp, m)?,
        wrap_pyfunction!(score_weighted, m)?,
        wrap_pyfunction!(auc, m)?,
        wrap_pyfunction!(pauc, m)?,
        wrap_pyfunction!(mauc, m)?,
        wrap_pyfunction!(synth, m)?,
        wrap_pyfunction!(featurize_corpus, m)?,
        wrap_pyfunction!(train, m)?,
        wrap_pyfunction!(score, m)?,
        wrap_pyfunction!(evaluate, m)?,
    ] {
        m.add_function(f)?;
    }
    Ok(())
}
