use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use asd_core::config::RunConfig;
use asd_core::dataio::SynthSpec;
use asd_core::kv::KvDoc;
use asd_core::pipeline::{
    default_cache_dir, load_model, run_eval, run_featurize, run_score, run_synth, run_train, write_score_output,
};
use asd_core::AsdError;

#[derive(Parser)]
#[command(name = "asd", version, about = "Anomalous sound detection with an ID-constrained Transformer autoencoder")]
struct Cli {
    #[command(flatten)]
    common: Common,
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    machine_type: Option<String>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus in DCASE layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute and cache features for every clip of a corpus.
    Featurize {
        #[arg(long)]
        corpus: PathBuf,
        /// Cache directory [default: <corpus>/.asd_cache].
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Train a model for one machine type.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for checkpoint, sidecar and training log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Score the test split with a trained model.
    Score {
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Score CSV path; error sequences go next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Compute AUC, pAUC and mAUC and write report, ROC, histogram and plots.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Internal(String),
}

impl From<AsdError> for Failure {
    fn from(e: AsdError) -> Self {
        match e {
            AsdError::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Internal(other.to_string()),
        }
    }
}

fn overrides(common: &Common) -> Result<Vec<(String, String)>, Failure> {
    let mut out = common
        .overrides
        .iter()
        .map(|s| KvDoc::parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = common.seed {
        out.push(("seed".into(), seed.to_string()));
    }
    Ok(out)
}

fn run_config(common: &Common) -> Result<RunConfig, Failure> {
    Ok(RunConfig::layered(common.config.as_deref(), &overrides(common)?)?)
}

fn existing_dir(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    match &cli.command {
        Command::Synth { out } => {
            let mut doc = match &common.config {
                Some(path) => KvDoc::load(path)?,
                None => KvDoc::default(),
            };
            for (k, v) in overrides(common)? {
                doc.set(&k, v);
            }
            let spec = SynthSpec::from_kv(&doc)?;
            let written = run_synth(&spec, out)?;
            println!("wrote {} clips under {}", written.len(), out.join(&spec.machine_type).display());
        }
        Command::Featurize { corpus, cache } => {
            existing_dir(corpus, "corpus")?;
            let cfg = run_config(common)?;
            let cache = cache.clone().unwrap_or_else(|| default_cache_dir(corpus));
            let report = run_featurize(corpus, &cache, &cfg)?;
            println!("featurized {} clips, reused {}", report.computed, report.reused);
        }
        Command::Train { corpus, out, cache } => {
            existing_dir(corpus, "corpus")?;
            let cfg = run_config(common)?;
            let cache = cache.clone().unwrap_or_else(|| default_cache_dir(corpus));
            let outcome = run_train(corpus, common.machine_type.as_deref(), &cfg, &cache, out, |_, _| Ok(()))?;
            let log = &outcome.trained.log.epochs;
            if let (Some(first), Some(last)) = (log.first(), log.last()) {
                println!(
                    "trained {} for {} epochs: L_r {:.4} -> {:.4}",
                    outcome.sidecar.machine_type,
                    log.len(),
                    first.loss_r,
                    last.loss_r
                );
            }
        }
        Command::Score { model, corpus, out, cache } => {
            existing_dir(corpus, "corpus")?;
            existing_dir(model, "model directory")?;
            let cfg = run_config(common)?;
            if let Some(t) = &common.machine_type {
                let (_, _, sidecar) = load_model(model)?;
                if !sidecar.machine_type.eq_ignore_ascii_case(t) {
                    return Err(Failure::Usage(format!(
                        "model was trained for {}, not {t}",
                        sidecar.machine_type
                    )));
                }
            }
            let cache = cache.clone().unwrap_or_else(|| default_cache_dir(corpus));
            let scored = run_score(model, corpus, &cfg, &cache)?;
            write_score_output(&scored, out)?;
            println!(
                "scored {} clips; ID accuracy on normal clips {:.4}",
                scored.records.len(),
                scored.id_accuracy
            );
        }
        Command::Eval { scores, out } => {
            if !scores.is_file() {
                return Err(Failure::Usage(format!("score file {} does not exist", scores.display())));
            }
            let cfg = run_config(common)?;
            let result = run_eval(scores, &cfg, out)?;
            for row in result.rows.iter().filter(|r| r.machine_id == "ALL") {
                println!("{} {} {:.4}", row.machine_type, row.metric, row.value);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
