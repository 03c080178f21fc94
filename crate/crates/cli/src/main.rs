use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmfuse::augment::{load_precomputed_pairs, AugmentedView};
use mmfuse::check::{run_checks, CheckLevel};
use mmfuse::checkpoint::{load_checkpoint, save_checkpoint};
use mmfuse::config::RunConfig;
use mmfuse::data::{generate_synthetic_dataset, read_dataset, write_dataset, ClassIndex, Dataset, NUM_CLASSES};
use mmfuse::losses::{read_vocab_file, write_vocab_file};
use mmfuse::model::Model;
use mmfuse::trainer::{
    cross_validate_with, evaluate, train, write_confusion_csv, write_history_csv, write_json,
};
use mmfuse::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "mmfuse", version, about = "Speech + text emotion recognition experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run config with [data] [model] [loss] [train] [augment] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// full, wo_ctc, wo_scl, wo_acl or ce_only.
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigArgs {
    /// `seed_key` is the config entry `--seed` maps to.
    fn load(&self, seed_key: &str) -> mmfuse::Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("{seed_key}={s}"));
        }
        if let Some(e) = self.epochs {
            overrides.push(format!("train.epochs={e}"));
        }
        if let Some(p) = &self.preset {
            overrides.push(format!("train.preset=\"{p}\""));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on a whole dataset.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and print metrics as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CTC character file (one symbol per line) the model must match.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Also write the confusion matrix CSV here.
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
    /// Leave-one-session-out cross-validation.
    Cv {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run oracle-agreement and gradient checks.
    Check {
        #[arg(long, default_value = "fast")]
        level: String,
        /// Corrupt the model gradient to confirm the suite catches it.
        #[arg(long)]
        inject_fault: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 3,
        Error::Io { .. }
        | Error::MissingBlob { .. }
        | Error::CorruptHeader { .. }
        | Error::DimensionMismatch { .. }
        | Error::Manifest { .. }
        | Error::MissingPairs(_)
        | Error::Checkpoint(_) => 4,
        Error::Evaluation(_) | Error::GradCheck(_) | Error::OracleSize(_) => 1,
        _ => 2,
    }
}

fn echo_config(cfg: &RunConfig, out: &Path) -> mmfuse::Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let path = out.join("config.toml");
    fs::write(&path, cfg.to_toml_string()).map_err(|e| Error::Io { path, source: e })
}

/// Fits the model section to the dataset it will see.
fn bind_to_data(cfg: &mut RunConfig, data: &Dataset) {
    cfg.model.d_a = data.meta.d_a;
    if data.meta.token_vocab_size > 0 {
        cfg.model.token_vocab_size = data.meta.token_vocab_size;
    }
}

fn load_pairs(cfg: &RunConfig, data: &Dataset) -> mmfuse::Result<Option<BTreeMap<String, AugmentedView>>> {
    match &cfg.augment.pairs {
        Some(p) => load_precomputed_pairs(p, data).map(Some),
        None => Ok(None),
    }
}

fn histogram_line(data: &Dataset) -> String {
    let h = data.class_histogram();
    (0..NUM_CLASSES)
        .map(|c| format!("{}={}", ClassIndex::new(c).unwrap().name(), h[c]))
        .collect::<Vec<_>>()
        .join(" ")
}

fn run(cli: Cli) -> mmfuse::Result<ExitCode> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.load("data.seed")?;
            let data = generate_synthetic_dataset(&cfg.data)?;
            write_dataset(&data, &out)?;
            echo_config(&cfg, &out)?;
            println!(
                "wrote {} utterances, {} sessions to {}",
                data.len(),
                data.sessions().len(),
                out.display()
            );
            println!("classes: {}", histogram_line(&data));
        }
        Command::Train { config, data, out } => {
            let mut cfg = config.load("train.seed")?;
            let dataset = read_dataset(&data)?;
            bind_to_data(&mut cfg, &dataset);
            echo_config(&cfg, &out)?;
            let pairs = load_pairs(&cfg, &dataset)?;
            let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
            let outcome = train(&mut model, &dataset, &cfg.train, &cfg.augment, pairs.as_ref())?;
            save_checkpoint(&model, &out.join("model.ckpt"))?;
            write_history_csv(&out.join("history.csv"), &outcome.history)?;
            write_vocab_file(&model.ctc_head.vocab, &out.join("vocab.txt"))?;
            let last = outcome.history.last();
            println!(
                "trained {} epochs ({} optimizer steps), final total loss {}",
                outcome.history.len(),
                outcome.optimizer_steps,
                last.map(|r| r.total).unwrap_or(f64::NAN)
            );
        }
        Command::Eval {
            model,
            data,
            vocab,
            confusion,
        } => {
            let model = load_checkpoint(&model)?;
            if let Some(v) = vocab {
                let vocab = read_vocab_file(&v)?;
                if vocab != model.ctc_head.vocab {
                    return Err(Error::Config(format!(
                        "vocabulary in {} does not match the checkpoint's CTC symbols",
                        v.display()
                    )));
                }
            }
            let dataset = read_dataset(&data)?;
            let metrics = evaluate(&model, &dataset)?;
            if let Some(path) = confusion {
                write_confusion_csv(&path, &metrics)?;
            }
            println!("{}", serde_json::to_string_pretty(&metrics).expect("serializable"));
        }
        Command::Cv { config, data, out } => {
            let mut cfg = config.load("train.seed")?;
            let dataset = read_dataset(&data)?;
            bind_to_data(&mut cfg, &dataset);
            echo_config(&cfg, &out)?;
            let pairs = load_pairs(&cfg, &dataset)?;
            let report = cross_validate_with(
                &dataset,
                &cfg.model,
                &cfg.train,
                &cfg.augment,
                pairs.as_ref(),
                |fold, model| {
                    let dir = out.join(format!("fold_{}", fold.test_session));
                    write_json(&dir.join("metrics.json"), &fold.metrics)?;
                    write_confusion_csv(&dir.join("confusion.csv"), &fold.metrics)?;
                    write_history_csv(&dir.join("history.csv"), &fold.history)?;
                    save_checkpoint(model, &dir.join("model.ckpt"))?;
                    println!(
                        "fold {}: WA {:.4} UA {:.4}",
                        fold.test_session, fold.metrics.weighted_accuracy, fold.metrics.unweighted_accuracy
                    );
                    Ok(())
                },
            )?;
            let folds: Vec<_> = report
                .folds
                .iter()
                .map(|f| {
                    json!({
                        "test_session": f.test_session,
                        "train_sessions": f.train_sessions,
                        "weighted_accuracy": f.metrics.weighted_accuracy,
                        "unweighted_accuracy": f.metrics.unweighted_accuracy,
                        "n_test": f.metrics.n,
                    })
                })
                .collect();
            let summary = json!({
                "preset": cfg.train.preset.as_str(),
                "folds": folds,
                "mean_wa": report.mean_wa,
                "mean_ua": report.mean_ua,
            });
            write_json(&out.join("summary.json"), &summary)?;
            println!("mean WA {:.4} over {} folds", report.mean_wa, report.folds.len());
        }
        Command::Check { level, inject_fault } => {
            let level: CheckLevel = level.parse()?;
            let suite = run_checks(level, inject_fault);
            print!("{suite}");
            if !suite.passed() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
