use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dds_cli::decompose::AudioInput;
use dds_cli::{cmd_decompose, cmd_eval, cmd_synth, cmd_train, run_all, Layout, Method, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "dds", version, about = "Spectrogram decomposition with per-note normalizing flows")]
struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render presets, split frames, note audio and pieces.
    Synth,
    /// Train one flow per (split, note).
    Train {
        /// Retrain models that already exist.
        #[arg(long)]
        retrain: bool,
    },
    /// Decompose note test frames and pieces.
    Decompose {
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Overrides the likelihood penalty weight.
        #[arg(long)]
        c: Option<f64>,
        /// Also decompose this WAV file.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Split whose sources decompose `--input` (default: the first split).
        #[arg(long, requires = "input")]
        split: Option<String>,
    },
    /// Write the evaluation reports.
    Eval,
    /// All stages in order.
    Run,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MethodArg {
    Nmf,
    Dds,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Nmf => Method::Nmf,
            MethodArg::Dds => Method::Dds,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let layout = Layout::new(&cli.out);
    match cli.command {
        Command::Synth => {
            cmd_synth(&cfg, &layout, cli.force)?;
        }
        Command::Train { retrain } => {
            cmd_train(&cfg, &layout, retrain || cli.force)?;
        }
        Command::Decompose { method, c, input, split } => {
            if let Some(c) = c {
                cfg.dds.c = c;
            }
            let split = split.unwrap_or_else(|| cfg.data.splits[0].name.clone());
            let audio = input.as_deref().map(|path| AudioInput { path, split: &split });
            cmd_decompose(&cfg, &layout, method.into(), audio)?;
        }
        Command::Eval => {
            cmd_eval(&cfg, &layout)?;
        }
        Command::Run => {
            run_all(&cfg, &layout, cli.force)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "error": e.to_string(),
                "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
