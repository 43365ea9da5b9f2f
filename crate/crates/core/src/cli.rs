//! Command-line front end used by the `mora` binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. The seed comes
//! from, in increasing precedence: the preset, the config file,
//! `MORA_SEED`, `--seed`.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::ablation::{run_ablation, AblationKind};
use crate::checkpoint;
use crate::config::{Preset, RunConfig};
use crate::data::{load_dataset, synth_dataset, to_jsonl, SynthTask};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::mol::parse_smiles;
use crate::train::{train, AdaptationKind, StepLog, TrainOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "mora", version, about = "Graph-conditioned low-rank adaptation of a frozen character-level LM")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config file and MORA_SEED.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Base settings the config file applies to.
    #[arg(long, global = true, value_parser = ["desk", "paper"])]
    pub preset: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the weight generator (or the static baseline) on a JSONL dataset.
    Train {
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Checkpoint destination.
        #[arg(long, value_name = "PATH", default_value = "mora.ckpt")]
        out: PathBuf,
        /// Loss log CSV (`step,lr,loss`).
        #[arg(long, value_name = "PATH")]
        log: Option<PathBuf>,
        /// Train the input-independent baseline instead.
        #[arg(long = "static")]
        static_baseline: bool,
    },
    /// Evaluate a checkpoint; prints a table, optionally writes CSV.
    Eval {
        #[arg(long, value_name = "PATH", default_value = "mora.ckpt")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Greedy answer for one input.
    Generate {
        #[arg(long, value_name = "PATH", default_value = "mora.ckpt")]
        checkpoint: PathBuf,
        #[arg(long)]
        smiles: Option<String>,
        #[arg(long)]
        instruction: String,
    },
    /// Print the adjacency listing of a SMILES string.
    Parse { smiles: String },
    /// Write a synthetic JSONL dataset.
    Synth {
        #[arg(long)]
        task: String,
        #[arg(long)]
        n: usize,
        /// Output file; stdout when absent.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Run an ablation sweep and write its reports.
    Ablate {
        #[arg(long, value_parser = ["targets", "depth", "static_vs_dynamic", "passthrough"])]
        kind: String,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Evaluation set; defaults to the training data.
        #[arg(long, value_name = "PATH")]
        eval_data: Option<PathBuf>,
        #[arg(long, value_name = "DIR", default_value = "ablation")]
        out: PathBuf,
        /// Concurrent runs; defaults to the available cores.
        #[arg(long)]
        threads: Option<usize>,
    },
}

/// Resolves the run configuration from the global flags and environment.
pub fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let flag_preset: Option<Preset> = g.preset.as_deref().map(str::parse).transpose()?;
    let mut config = match &g.config {
        Some(path) => {
            let c = RunConfig::load(path, flag_preset.unwrap_or_default())?;
            if let Some(p) = flag_preset {
                if c.preset != p {
                    return Err(Error::Config(format!(
                        "--preset {p} conflicts with preset {} in {}",
                        c.preset,
                        path.display()
                    )));
                }
            }
            c
        }
        None => RunConfig::preset(flag_preset.unwrap_or_default()),
    };
    config.apply_env()?;
    if let Some(s) = g.seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn write_or_print(path: Option<&PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            data,
            out,
            log,
            static_baseline,
        } => {
            let config = resolve_config(&cli.global)?;
            let dataset = load_dataset(&data)?;
            let kind = if static_baseline {
                AdaptationKind::Static
            } else {
                AdaptationKind::Dynamic
            };
            let on_step = Box::new(|s: &StepLog| {
                if s.step.is_multiple_of(100) {
                    eprintln!("step {:>6}  lr {:.3e}  loss {:.5}", s.step, s.lr, s.loss);
                }
            });
            let outcome = train(
                &config,
                &dataset,
                kind,
                TrainOptions {
                    checkpoint: Some(out.clone()),
                    log,
                    on_step: Some(on_step),
                },
            )?;
            let steps = outcome.log.len();
            let last = outcome.log.last().map_or(f64::NAN, |s| s.loss);
            println!("trained {kind} adaptation for {steps} steps; last loss {last:.6}");
            println!(
                "freeze audit: backbone+encoder {}, {} parameters {}",
                if outcome.audit.frozen_intact() { "unchanged" } else { "CHANGED" },
                outcome.model.adaptation.group_name(),
                if outcome.audit.adaptation_changed() { "updated" } else { "unchanged" }
            );
            println!("checkpoint: {}", out.display());
            Ok(())
        }
        Command::Eval { checkpoint, data, csv } => {
            let (model, _) = checkpoint::load(&checkpoint)?;
            let dataset = load_dataset(&data)?;
            let (report, _) = evaluate(&model, &dataset)?;
            print!("{}", report.to_text());
            if let Some(p) = csv {
                fs::write(&p, report.to_csv()).map_err(|e| Error::io(&p, e))?;
            }
            Ok(())
        }
        Command::Generate {
            checkpoint,
            smiles,
            instruction,
        } => {
            let (model, _) = checkpoint::load(&checkpoint)?;
            println!("{}", model.generate(smiles.as_deref(), &instruction)?);
            Ok(())
        }
        Command::Parse { smiles } => {
            let g = parse_smiles(&smiles)?;
            print!("{}", g.adjacency_listing());
            Ok(())
        }
        Command::Synth { task, n, out } => {
            let config = resolve_config(&cli.global)?;
            let task: SynthTask = task.parse()?;
            let data = synth_dataset(task, n, config.seed);
            write_or_print(out.as_ref(), &to_jsonl(&data)?)
        }
        Command::Ablate {
            kind,
            data,
            eval_data,
            out,
            threads,
        } => {
            let config = resolve_config(&cli.global)?;
            let kind: AblationKind = kind.parse()?;
            let train_set = load_dataset(&data)?;
            let eval_set = match &eval_data {
                Some(p) => load_dataset(p)?,
                None => train_set.clone(),
            };
            let threads = threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let result = run_ablation(kind, &config, &train_set, &eval_set, threads)?;
            result.write_to_dir(&out)?;
            print!("{}", result.summary_csv());
            let failed = result.runs.iter().filter(|r| r.outcome.is_err()).count();
            if failed > 0 {
                eprintln!("{failed} of {} runs failed; see {}", result.runs.len(), out.join("summary.csv").display());
            }
            Ok(())
        }
    }
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
