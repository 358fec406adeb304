//! `muse` command line: data generation, search, retraining, evaluation,
//! ablations and reports.
//!
//! Every subcommand reads an optional key-value config (`--config`), applies
//! `--set key=value` overrides in order, then the `MUSE_SEED` environment
//! variable. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use muse_core::config::Config;
use muse_core::data::{corrupt_partial, validate, write_features, write_jsonl, DatasetSplit};
use muse_core::harness::{
    evaluate_model, load_or_generate, parse_chain_kind, run_baseline, run_experiment, run_operator_ablation,
    run_path_ablation, ExperimentReport, ReportRow,
};
use muse_core::model::{bilevel_search, load_checkpoint, retrain_discrete, save_checkpoint, Muse};
use muse_core::{MuseError, Result};

#[derive(Parser)]
#[command(name = "muse", version, about = "Multimodal architecture search over text and image features")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key-value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (`.musef` or `.jsonl`).
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop exactly one modality from every sample.
    Corrupt {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the bilevel search and save the mixed model.
    Search {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep the strongest candidate on every edge of a searched model.
    Discretize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the weights of the discrete model.
    Retrain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test-set metrics of a saved model.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "MUSE")]
        label: String,
        #[command(flatten)]
        output: Output,
    },
    /// Search once, then retrain with fewer and fewer candidate operators.
    AblateOperators {
        #[arg(long)]
        data: Option<PathBuf>,
        /// `linear` or `sequence`; defaults to the config's `ablation.path`.
        #[arg(long)]
        path: Option<String>,
        #[command(flatten)]
        output: Output,
    },
    /// Full model and each single-path removal.
    AblatePaths {
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Full pipeline: search, evaluate, discretize, retrain, evaluate.
    Report {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Add a row for the concatenation baseline.
        #[arg(long)]
        baseline: bool,
        /// Save the final discrete model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Check a `.musef` file and print its summary.
    Validate {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Args)]
struct Output {
    /// Write the CSV report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the aligned table here instead of stdout.
    #[arg(long)]
    table: Option<PathBuf>,
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::parse(&std::fs::read_to_string(p).map_err(|e| config_io(p, e))?)?,
        None => Config::default(),
    };
    apply_overrides(&mut cfg, &common.overrides)?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut Config, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| MuseError::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.apply_env()?;
    cfg.validate()
}

fn config_io(p: &Path, e: std::io::Error) -> MuseError {
    MuseError::Config(format!("{}: {e}", p.display()))
}

fn write_dataset(ds: &DatasetSplit, path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        write_jsonl(ds, path)
    } else {
        write_features(ds, path)
    }
}

fn emit(report: &ExperimentReport, output: &Output) -> Result<()> {
    if let Some(p) = &output.out {
        std::fs::write(p, report.to_csv())?;
    }
    match &output.table {
        Some(p) => std::fs::write(p, report.to_table())?,
        None => print!("{}", report.to_table()),
    }
    Ok(())
}

/// Checkpoint config with the command line overrides applied on top.
fn checkpoint_config(saved: Config, common: &Common) -> Result<Config> {
    let mut cfg = saved;
    apply_overrides(&mut cfg, &common.overrides)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::Synth { out } => {
            let cfg = load_config(common)?;
            let ds = load_or_generate(&cfg, None)?;
            write_dataset(&ds, &out)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Corrupt { input, out } => {
            let cfg = load_config(common)?;
            let ds = load_or_generate(&cfg, Some(&input))?;
            let corrupted = corrupt_partial(&ds, cfg.seed)?;
            write_dataset(&corrupted, &out)?;
            println!("wrote {} samples to {}", corrupted.len(), out.display());
        }
        Command::Search { data, out } => {
            let cfg = load_config(common)?;
            let ds = load_or_generate(&cfg, data.as_deref())?;
            let mut model = Muse::new(&cfg.model, ds.dims, cfg.seed)?;
            let log = bilevel_search(&mut model, &ds, &cfg.train)?;
            save_checkpoint(&out, &cfg, &model)?;
            println!(
                "best validation accuracy {:.6} at epoch {}\n{}",
                log.best_valid_accuracy,
                log.best_epoch,
                model.genotype()
            );
        }
        Command::Discretize { checkpoint, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = checkpoint_config(ck.config, common)?;
            let mut model = ck.model;
            model.discretize();
            save_checkpoint(&out, &cfg, &model)?;
            print!("{}", model.genotype());
        }
        Command::Retrain { checkpoint, data, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = checkpoint_config(ck.config, common)?;
            let ds = load_or_generate(&cfg, data.as_deref())?;
            let mut model = ck.model;
            let log = retrain_discrete(&mut model, &ds, &cfg.train)?;
            save_checkpoint(&out, &cfg, &model)?;
            println!(
                "best validation accuracy {:.6} at epoch {}",
                log.best_valid_accuracy, log.best_epoch
            );
        }
        Command::Eval {
            checkpoint,
            data,
            label,
            output,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = checkpoint_config(ck.config, common)?;
            let ds = load_or_generate(&cfg, data.as_deref())?;
            let metrics = evaluate_model(&ck.model, &ds, cfg.train.batch_size)?;
            let report = ExperimentReport {
                title: "MUSE evaluation".into(),
                seed: cfg.seed,
                config_echo: cfg.to_text(),
                rows: vec![ReportRow {
                    label,
                    metrics,
                    genotype: ck.model.genotype(),
                }],
                wall_clock_secs: 0.0,
            };
            emit(&report, &output)?;
        }
        Command::AblateOperators { data, path, output } => {
            let mut cfg = load_config(common)?;
            if let Some(p) = path {
                cfg.ablation_path = parse_chain_kind(&p)?;
            }
            let ds = load_or_generate(&cfg, data.as_deref())?;
            let out = run_experiment(&cfg, &ds)?;
            emit(&run_operator_ablation(&cfg, &ds, &out.searched)?, &output)?;
        }
        Command::AblatePaths { data, output } => {
            let cfg = load_config(common)?;
            let ds = load_or_generate(&cfg, data.as_deref())?;
            emit(&run_path_ablation(&cfg, &ds)?, &output)?;
        }
        Command::Report {
            data,
            baseline,
            checkpoint,
            output,
        } => {
            let cfg = load_config(common)?;
            let ds = load_or_generate(&cfg, data.as_deref())?;
            let out = run_experiment(&cfg, &ds)?;
            let mut report = out.report;
            if baseline {
                report.rows.push(ReportRow {
                    label: "Concat baseline".into(),
                    metrics: run_baseline(&cfg, &ds)?,
                    genotype: String::new(),
                });
            }
            if let Some(p) = &checkpoint {
                save_checkpoint(p, &cfg, &out.discrete)?;
            }
            emit(&report, &output)?;
        }
        Command::Validate { input } => {
            let s = validate(&input)?;
            println!("version {}", s.version);
            println!("train {} valid {} test {}", s.counts[0], s.counts[1], s.counts[2]);
            println!(
                "text {}x{} image {}x{}",
                s.dims.k_t, s.dims.d_t, s.dims.k_v, s.dims.d_v
            );
            println!("text absent {} image absent {}", s.text_absent, s.image_absent);
            println!("sha256 {}", s.checksum);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("muse: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
