use std::path::PathBuf;
use std::process::ExitCode;

use amrnn::experiment::{run_experiment, Command, ExperimentConfig};
use amrnn::Error;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "amrnn", version, about = "Associative-memory RNN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Sub,

    /// `key = value` configuration file applied before any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory under which the timestamped run directory is created.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[arg(long, global = true, value_parser = ["gru", "am-gru", "dual-am-gru"])]
    arch: Option<String>,

    /// Number of permuted memory copies.
    #[arg(long, global = true)]
    redundancy: Option<usize>,

    #[arg(long, global = true)]
    hidden: Option<usize>,

    #[arg(long, global = true, value_parser = ["copy", "kv", "entail", "snli"])]
    task: Option<String>,

    /// Extra `key=value` override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Sub {
    /// Train a classifier (or the auto-encoder for task=copy).
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval,
    /// Write premise/hypothesis cosine heatmaps from a checkpoint.
    Heatmap,
    /// Train the auto-encoder on the copy task, logging key collapse.
    Autoencode,
    /// Monte-Carlo retrieval-noise benchmark.
    NoiseBench,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Train => Command::Train,
            Sub::Eval => Command::Eval,
            Sub::Heatmap => Command::Heatmap,
            Sub::Autoencode => Command::Autoencode,
            Sub::NoiseBench => Command::NoiseBench,
        }
    }
}

fn build_config(cli: &Cli) -> amrnn::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(arch) = &cli.arch {
        cfg.set("arch", arch)?;
    }
    if let Some(n) = cli.redundancy {
        cfg.redundancy = n;
    }
    if let Some(h) = cli.hidden {
        cfg.hidden = h;
    }
    if let Some(task) = &cli.task {
        cfg.set("task", task)?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn is_usage_error(e: &Error) -> bool {
    matches!(e, Error::InvalidArgument(_) | Error::Parse { .. })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run_experiment(cli.command.into(), &cfg) {
        Ok(summary) => {
            println!("run directory: {}", summary.dir.display());
            for (k, v) in &summary.values {
                println!("{k} = {v}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_usage_error(&e) { 2 } else { 1 })
        }
    }
}
