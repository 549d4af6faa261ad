//! Command-line front end: `sslab <command> [--config FILE] [key=value ...]`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

use crate::config::RunConfig;
use crate::error::{AppError, AppResult};
use crate::pipeline;
use crate::runs::{create_run_dir, runs_root, write_echo};
use crate::sweep::{run_sweep, SWEEP_CSV};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Render the dataset splits.
    GenData,
    /// Train an energy model on the pretraining split.
    PretrainEbm,
    /// Train the image encoder contrastively on the pretraining split.
    PretrainCl,
    /// Train the question-answering model, optionally from a pretrained encoder.
    Finetune,
    /// Score a labelled split.
    Evaluate,
    /// Out-of-distribution detection scores and AUROC.
    Ood,
    /// Joint energy-based training of the question-answering model.
    Jem,
    /// Conditional energy model on a pretrained encoder.
    Cebm,
    /// Data-ablation sweep.
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::PretrainEbm => "pretrain-ebm",
            Command::PretrainCl => "pretrain-cl",
            Command::Finetune => "finetune",
            Command::Evaluate => "evaluate",
            Command::Ood => "ood",
            Command::Jem => "jem",
            Command::Cebm => "cebm",
            Command::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sslab", version, about = "Self-supervised pretraining laboratory")]
struct Cli {
    command: Command,
    /// Configuration file with `key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configuration overrides, highest precedence.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

/// Runs one command in a fresh run directory under the runs root and
/// returns that directory.
pub fn run_command(command: Command, cfg: &RunConfig) -> AppResult<PathBuf> {
    run_command_in(command, cfg, &runs_root())
}

pub fn run_command_in(command: Command, cfg: &RunConfig, root: &Path) -> AppResult<PathBuf> {
    let run = match (command, cfg.path("sweep.resume")) {
        (Command::Sweep, Some(dir)) => {
            if !dir.join(SWEEP_CSV).exists() {
                return Err(AppError::Missing(format!("no {SWEEP_CSV} to resume in {}", dir.display())));
            }
            dir
        }
        _ => create_run_dir(root, command.name(), cfg.seed()?)?,
    };
    write_echo(&run, cfg)?;
    log::info!("run directory {}", run.display());
    match command {
        Command::GenData => {
            let out = pipeline::gen_data(cfg, &run)?;
            println!("dataset written to {}", out.dir.display());
            for (split, n) in &out.counts {
                println!("  {split}: {n}");
            }
        }
        Command::PretrainEbm => {
            let out = pipeline::run_pretrain_ebm(cfg, &run)?;
            println!("{} steps, final loss {:.4}; checkpoint {}", out.steps, out.final_loss, out.checkpoint.display());
        }
        Command::PretrainCl => {
            let out = pipeline::run_pretrain_cl(cfg, &run)?;
            println!("{} steps, final loss {:.4}; checkpoint {}", out.steps, out.final_loss, out.checkpoint.display());
        }
        Command::Finetune | Command::Jem | Command::Cebm => {
            let out = match command {
                Command::Finetune => pipeline::run_finetune(cfg, &run)?,
                Command::Jem => pipeline::run_jem(cfg, &run)?,
                _ => pipeline::run_cebm(cfg, &run)?,
            };
            println!("best epoch {}; checkpoint {}", out.best_epoch, out.checkpoint.display());
            for e in &out.evaluations {
                print_metrics(&e.row);
            }
        }
        Command::Evaluate => print_metrics(&pipeline::run_evaluate(cfg, &run)?.row),
        Command::Ood => {
            let out = pipeline::run_ood(cfg, &run)?;
            println!("AUROC ({})", out.summary.sources.join(", "));
            for (model, values) in &out.summary.rows {
                let v: Vec<String> = values.iter().map(|a| format!("{a:.4}")).collect();
                println!("  {model}: {}", v.join(", "));
            }
        }
        Command::Sweep => {
            let rows = run_sweep(cfg, &run)?;
            let failed = rows.iter().filter(|r| r.test_accuracy.is_nan()).count();
            println!("{} points, {failed} failed", rows.len());
        }
    }
    println!("run directory: {}", run.display());
    Ok(run)
}

fn print_metrics(r: &crate::tables::MetricsRow) {
    let ood = match (r.ood_accuracy, r.ood_ece) {
        (Some(a), Some(e)) => format!(", unseen-combination accuracy {a:.4} ECE {e:.4} (n={})", r.ood_n),
        _ => String::new(),
    };
    println!("{}: accuracy {:.4}, ECE {:.4} (n={}){ood}", r.split, r.accuracy, r.ece, r.n);
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = RunConfig::parse(cli.config.as_deref(), &cli.overrides).and_then(|cfg| run_command(cli.command, &cfg));
    match result {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let AppError::Numerical { checkpoint, .. } = &e {
                match checkpoint {
                    Some(p) => eprintln!("last good checkpoint: {}", p.display()),
                    None => eprintln!("no checkpoint was written before the failure"),
                }
            }
            e.exit_code()
        }
    }
}
