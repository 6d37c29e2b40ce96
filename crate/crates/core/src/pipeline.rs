//! End-to-end steps behind the command-line tool: synthesize, featurize,
//! train, score and evaluate. Every step reads and writes plain files so
//! the steps can run in separate processes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataio::{
    cache_features, scan_corpus, CacheReport, ClipMeta, Condition, FeatureCache, ScanReport, Split, SynthSpec,
};
use crate::dsp::{DspConfig, FeatureStats, Featurizer};
use crate::error::{AsdError, Result};
use crate::metrics::{
    auc, histogram, histogram_svg, mauc, pauc, roc_curve, roc_svg, write_histograms, write_report_csv,
    write_roc_csv, ReportRow, ScoreGroup,
};
use crate::model::{Model, ModelConfig};
use crate::numgrad::Checkpoint;
use crate::scorer::{
    analyze_clip, read_errors_csv, read_scores_csv, score_gwrp, score_weighted, write_errors_csv,
    write_scores_csv, ErrorSequence, ScoreRecord,
};
use crate::trainer::{argmax, fit_with_callback, EpochRecord, TrainSet, TrainedModel};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SIDECAR_FILE: &str = "model.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CACHE_DIR: &str = ".asd_cache";

/// Model description stored next to the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub machine_type: String,
    pub ids: Vec<String>,
    pub model: ModelConfig,
    pub dsp: DspConfig,
}

pub fn default_cache_dir(corpus: &Path) -> PathBuf {
    corpus.join(CACHE_DIR)
}

pub fn run_synth(spec: &SynthSpec, out: &Path) -> Result<Vec<PathBuf>> {
    crate::dataio::write_synth_corpus(spec, out)
}

pub fn run_featurize(corpus: &Path, cache_dir: &Path, cfg: &RunConfig) -> Result<CacheReport> {
    let report = scan_corpus(corpus)?;
    let featurizer = Featurizer::new(cfg.dsp.clone())?;
    cache_features(corpus, &report.clips, &featurizer, cache_dir)
}

/// The requested machine type, or the only one present in the corpus.
pub fn resolve_machine_type(report: &ScanReport, requested: Option<&str>) -> Result<String> {
    let types = report.machine_types();
    match requested {
        Some(t) => types
            .iter()
            .find(|x| x.eq_ignore_ascii_case(t))
            .cloned()
            .ok_or_else(|| AsdError::Config(format!("machine type {t:?} not found; corpus has {types:?}"))),
        None if types.len() == 1 => Ok(types[0].clone()),
        None => Err(AsdError::Config(format!(
            "corpus holds several machine types {types:?}; pick one with --machine-type"
        ))),
    }
}

fn relative(corpus: &Path, clip: &ClipMeta) -> String {
    clip.path.strip_prefix(corpus).unwrap_or(&clip.path).to_string_lossy().replace('\\', "/")
}

fn id_index(ids: &[String], id: &str) -> Result<usize> {
    ids.iter()
        .position(|x| x == id)
        .ok_or_else(|| AsdError::Config(format!("machine id {id} is not in the trained vocabulary {ids:?}")))
}

/// Loads the training split of `machine_type` with labels from `ids`.
pub fn load_train_set(
    corpus: &Path,
    report: &ScanReport,
    machine_type: &str,
    ids: &[String],
    cache: &FeatureCache,
    featurizer: &Featurizer,
) -> Result<TrainSet> {
    let mut set = TrainSet::default();
    for clip in report.select(machine_type, Split::Train) {
        set.push(cache.load(corpus, clip, featurizer)?, id_index(ids, &clip.machine_id)?);
    }
    Ok(set)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trained: TrainedModel,
    pub sidecar: Sidecar,
}

/// Trains one model per machine type and writes checkpoint, sidecar and
/// training log into `out_dir`.
pub fn run_train<F>(
    corpus: &Path,
    machine_type: Option<&str>,
    cfg: &RunConfig,
    cache_dir: &Path,
    out_dir: &Path,
    on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord, &Model) -> Result<()>,
{
    let report = scan_corpus(corpus)?;
    let machine_type = resolve_machine_type(&report, machine_type)?;
    let ids = report.id_vocabulary(&machine_type);
    if ids.is_empty() {
        return Err(AsdError::State(format!("no training clips for {machine_type}")));
    }
    let featurizer = Featurizer::new(cfg.dsp.clone())?;
    let cache = FeatureCache::open(cache_dir, &cfg.dsp)?;
    let set = load_train_set(corpus, &report, &machine_type, &ids, &cache, &featurizer)?;
    let model_config = cfg.model_config(ids.len());
    log::info!(
        "training {machine_type}: {} clips, {} ids, {} parameters",
        set.len(),
        ids.len(),
        Model::new(model_config.clone(), cfg.train.seed)?.store.parameter_count()
    );
    let trained = fit_with_callback(&set, model_config.clone(), &cfg.train_config(), on_epoch)?;

    fs::create_dir_all(out_dir).map_err(|e| AsdError::io(out_dir, e))?;
    trained
        .model
        .to_checkpoint(&trained.stats, cfg.render())
        .save(&out_dir.join(CHECKPOINT_FILE))?;
    let sidecar = Sidecar {
        machine_type,
        ids,
        model: model_config,
        dsp: cfg.dsp.clone(),
    };
    let json_path = out_dir.join(SIDECAR_FILE);
    fs::write(&json_path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| AsdError::io(&json_path, e))?;
    trained.log.write_csv(&out_dir.join(TRAIN_LOG_FILE))?;
    Ok(TrainOutcome { trained, sidecar })
}

pub fn load_model(model_dir: &Path) -> Result<(Model, FeatureStats, Sidecar)> {
    let json_path = model_dir.join(SIDECAR_FILE);
    let text = fs::read_to_string(&json_path).map_err(|e| AsdError::io(&json_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    let ckpt = Checkpoint::load(&model_dir.join(CHECKPOINT_FILE))?;
    let (model, stats) = Model::from_checkpoint(sidecar.model.clone(), &ckpt)?;
    Ok((model, stats, sidecar))
}

#[derive(Debug, Clone)]
pub struct ScoreOutput {
    pub records: Vec<ScoreRecord>,
    pub sequences: Vec<ErrorSequence>,
    /// Clip-level ID accuracy on normal test clips (argmax of the mean
    /// window distribution).
    pub id_accuracy: f64,
}

/// Scores every test clip of the model's machine type.
pub fn run_score(model_dir: &Path, corpus: &Path, cfg: &RunConfig, cache_dir: &Path) -> Result<ScoreOutput> {
    let (model, stats, sidecar) = load_model(model_dir)?;
    if sidecar.dsp != cfg.dsp {
        log::warn!("front-end settings differ from training; using the trained ones");
    }
    let report = scan_corpus(corpus)?;
    let machine_type = resolve_machine_type(&report, Some(&sidecar.machine_type))?;
    let featurizer = Featurizer::new(sidecar.dsp.clone())?;
    let cache = FeatureCache::open(cache_dir, &sidecar.dsp)?;
    let score_cfg = cfg.score_config(&machine_type);
    score_cfg.validate()?;
    let frames = sidecar.dsp.frames;

    let mut records = Vec::new();
    let mut sequences = Vec::new();
    let (mut correct, mut normals) = (0usize, 0usize);
    for clip in report.select(&machine_type, Split::Test) {
        let true_id = id_index(&sidecar.ids, &clip.machine_id)?;
        let features = cache.load(corpus, clip, &featurizer)?;
        let analysis = analyze_clip(&model, &stats, &features, frames, Some(true_id), true)?;
        if clip.condition == Condition::Normal {
            normals += 1;
            correct += usize::from(argmax(&analysis.mean_probs) == true_id);
        }
        let path = relative(corpus, clip);
        records.push(ScoreRecord::from_errors(
            path.clone(),
            machine_type.clone(),
            clip.machine_id.clone(),
            clip.condition,
            &analysis.errors,
            analysis.loss_c.expect("classifier ran"),
            &score_cfg,
        ));
        sequences.push(ErrorSequence::new(analysis.errors, path, clip.machine_id.clone())?);
    }
    if records.is_empty() {
        return Err(AsdError::State(format!("no test clips for {machine_type}")));
    }
    let id_accuracy = if normals > 0 { correct as f64 / normals as f64 } else { f64::NAN };
    log::info!("scored {} clips; ID accuracy on normal clips {id_accuracy:.4}", records.len());
    Ok(ScoreOutput {
        records,
        sequences,
        id_accuracy,
    })
}

/// Error-sequence file written next to a score CSV.
pub fn errors_path(scores_csv: &Path) -> PathBuf {
    let stem = scores_csv.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    scores_csv.with_file_name(format!("{stem}_errors.csv"))
}

pub fn write_score_output(out: &ScoreOutput, scores_csv: &Path) -> Result<()> {
    if let Some(parent) = scores_csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| AsdError::io(parent, e))?;
    }
    write_scores_csv(scores_csv, &out.records)?;
    write_errors_csv(&errors_path(scores_csv), &out.sequences)
}

fn groups_by_id(records: &[ScoreRecord], score: impl Fn(&ScoreRecord) -> f64) -> Vec<ScoreGroup> {
    let mut map: BTreeMap<String, ScoreGroup> = BTreeMap::new();
    for r in records {
        let g = map.entry(r.machine_id.clone()).or_insert_with(|| ScoreGroup {
            name: r.machine_id.clone(),
            ..ScoreGroup::default()
        });
        match r.label {
            Condition::Normal => g.normal.push(score(r)),
            Condition::Anomaly => g.anomaly.push(score(r)),
            Condition::Unknown => {}
        }
    }
    map.into_values().collect()
}

/// Per-ID AUC and pAUC, their averages across IDs and the worst-ID AUC.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeMetrics {
    pub per_id: Vec<(String, f64, f64)>,
    pub auc: f64,
    pub pauc: f64,
    pub mauc: f64,
}

pub fn type_metrics(records: &[ScoreRecord], p: f64, score: impl Fn(&ScoreRecord) -> f64) -> Result<TypeMetrics> {
    let groups = groups_by_id(records, score);
    let mut per_id = Vec::new();
    for g in &groups {
        let a = auc(&g.normal, &g.anomaly).map_err(|e| AsdError::Metric(format!("{}: {e}", g.name)))?;
        let pa = pauc(&g.normal, &g.anomaly, p).map_err(|e| AsdError::Metric(format!("{}: {e}", g.name)))?;
        per_id.push((g.name.clone(), a, pa));
    }
    let n = per_id.len() as f64;
    Ok(TypeMetrics {
        auc: per_id.iter().map(|x| x.1).sum::<f64>() / n,
        pauc: per_id.iter().map(|x| x.2).sum::<f64>() / n,
        mauc: mauc(&groups)?,
        per_id,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub machine_type: String,
    pub r: f64,
    pub auc: f64,
    pub pauc: f64,
}

/// Re-scores the stored error sequences over `r ∈ {0, 0.05, …, 1}` with
/// the configured β.
pub fn r_sweep(records: &[ScoreRecord], sequences: &[ErrorSequence], cfg: &RunConfig) -> Result<Vec<SweepPoint>> {
    let by_clip: BTreeMap<&str, &ErrorSequence> = sequences.iter().map(|s| (s.clip.as_str(), s)).collect();
    if let Some(r) = records.iter().find(|r| !by_clip.contains_key(r.clip_path.as_str())) {
        return Err(AsdError::State(format!("no error sequence for {}", r.clip_path)));
    }
    let mut out = Vec::new();
    for machine_type in machine_types(records) {
        let rows: Vec<ScoreRecord> = records.iter().filter(|r| r.machine_type == machine_type).cloned().collect();
        let beta = cfg.score_config(&machine_type).beta;
        for step in 0..=20 {
            let r = step as f64 * 0.05;
            let m = type_metrics(&rows, cfg.pauc_p, |rec| {
                score_weighted(score_gwrp(&by_clip[rec.clip_path.as_str()].errors, r), rec.loss_c, beta)
            })?;
            out.push(SweepPoint {
                machine_type: machine_type.clone(),
                r,
                auc: m.auc,
                pauc: m.pauc,
            });
        }
    }
    Ok(out)
}

fn machine_types(records: &[ScoreRecord]) -> Vec<String> {
    let mut t: Vec<String> = records.iter().map(|r| r.machine_type.clone()).collect();
    t.sort();
    t.dedup();
    t
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub rows: Vec<ReportRow>,
    pub sweep: Vec<SweepPoint>,
}

/// Writes `report.csv`, `histogram.csv`, and per machine type
/// `roc_<type>.csv`, `roc_<type>.svg`, `hist_<type>.svg`; with error
/// sequences available also `r_sweep.csv`.
pub fn run_eval(scores_csv: &Path, cfg: &RunConfig, out_dir: &Path) -> Result<EvalOutput> {
    let records = read_scores_csv(scores_csv)?;
    fs::create_dir_all(out_dir).map_err(|e| AsdError::io(out_dir, e))?;
    let mut rows = Vec::new();
    let mut hists = Vec::new();
    for machine_type in machine_types(&records) {
        let recs: Vec<ScoreRecord> = records.iter().filter(|r| r.machine_type == machine_type).cloned().collect();
        let m = type_metrics(&recs, cfg.pauc_p, |r| r.score_weighted)?;
        let row = |id: &str, metric: &'static str, value: f64| ReportRow {
            machine_type: machine_type.clone(),
            machine_id: id.to_string(),
            metric,
            value,
        };
        for (id, a, p) in &m.per_id {
            rows.push(row(id, "AUC", *a));
            rows.push(row(id, "pAUC", *p));
        }
        rows.push(row("ALL", "AUC", m.auc));
        rows.push(row("ALL", "pAUC", m.pauc));
        rows.push(row("ALL", "mAUC", m.mauc));

        let pick = |c: Condition| -> Vec<f64> { recs.iter().filter(|r| r.label == c).map(|r| r.score_weighted).collect() };
        let (normal, anomaly) = (pick(Condition::Normal), pick(Condition::Anomaly));
        let curve = roc_curve(&normal, &anomaly)?;
        write_roc_csv(&out_dir.join(format!("roc_{machine_type}.csv")), &curve)?;
        write_text(&out_dir.join(format!("roc_{machine_type}.svg")), &roc_svg(&format!("ROC {machine_type}"), &curve))?;
        let hist = histogram(&normal, &anomaly, cfg.hist_bins)?;
        write_text(
            &out_dir.join(format!("hist_{machine_type}.svg")),
            &histogram_svg(&format!("normalized scores {machine_type}"), &hist),
        )?;
        hists.push((machine_type.clone(), hist));
    }
    write_report_csv(&out_dir.join("report.csv"), &rows)?;
    write_histograms(&out_dir.join("histogram.csv"), &hists)?;

    let errors = errors_path(scores_csv);
    let sweep = if errors.is_file() {
        let sweep = r_sweep(&records, &read_errors_csv(&errors)?, cfg)?;
        let mut w = csv::Writer::from_path(out_dir.join("r_sweep.csv"))?;
        w.write_record(["machine_type", "r", "AUC", "pAUC"])?;
        for p in &sweep {
            w.write_record([p.machine_type.clone(), format!("{:.2}", p.r), p.auc.to_string(), p.pauc.to_string()])?;
        }
        w.flush().map_err(|e| AsdError::io(out_dir, e))?;
        sweep
    } else {
        Vec::new()
    };
    Ok(EvalOutput { rows, sweep })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| AsdError::io(path, e))
}
