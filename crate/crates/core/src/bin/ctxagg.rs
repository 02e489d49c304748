use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctxagg::pipeline::{run, Command, ExperimentConfig};

#[derive(Parser)]
#[command(name = "ctxagg", version, about = "External-context aggregation for event-sequence embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted override such as `local.epochs=200`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Simulate grouped Hawkes data.
    Synth,
    /// Contrastive encoder pretraining.
    Pretrain,
    /// Embedding trajectories, as-of index and refresh log.
    Embed,
    /// Train learnable aggregators.
    TrainAgg,
    EvalGlobal,
    EvalLocal,
    /// Context-size sweep.
    Sweep,
    /// Stage timings.
    Bench,
    /// Attention matrix over the context users.
    ExportAttn,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Synth => Command::Synth,
            Cmd::Pretrain => Command::Pretrain,
            Cmd::Embed => Command::Embed,
            Cmd::TrainAgg => Command::TrainAgg,
            Cmd::EvalGlobal => Command::EvalGlobal,
            Cmd::EvalLocal => Command::EvalLocal,
            Cmd::Sweep => Command::Sweep,
            Cmd::Bench => Command::Bench,
            Cmd::ExportAttn => Command::ExportAttn,
        }
    }
}

fn configure(cli: &Cli) -> ctxagg::Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = std::env::var("CTXAGG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("CTXAGG_THREADS ignored: {e}");
        }
    }
    match configure(&cli).and_then(|cfg| run(cli.command.into(), &cfg)) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
