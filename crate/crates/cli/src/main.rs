mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cure::par::Exec;
use cure::pipeline::Mode;

#[derive(Parser, Debug)]
#[command(name = "cure", version, about = "Controlled unlearning of conceptual shortcuts in text classifiers")]
struct Cli {
    /// Worker threads for data-parallel work (overrides CURE_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML config file. Missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set cure.tau=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Labeled JSONL corpus to use instead of the synthetic one.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus, its ground truth and split manifest.
    Generate {
        /// Synthetic corpus spec (TOML).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Annotate a corpus with concepts.
    Label {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Unlabeled JSONL corpus.
        #[arg(long)]
        input: PathBuf,
        /// `offline` or `live`; overrides `labeling.backend`.
        #[arg(long)]
        backend: Option<String>,
        /// Generator ground truth for the offline backend. Defaults to
        /// `generator.json` next to the input.
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Audit log; defaults to `<out>/audit.jsonl`.
        #[arg(long)]
        audit: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all stages and evaluate on both test splits.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        margin: Option<f64>,
        /// Continue from the latest checkpoint in `<out>/checkpoints`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many stages.
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate a finished training run.
    Eval {
        /// Output directory of `cure train`.
        #[arg(long)]
        run: PathBuf,
        /// Where to write the metrics; defaults to `<run>/eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a grid of modes x margins x seeds.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated modes.
        #[arg(long, value_delimiter = ',', default_value = "removal")]
        modes: Vec<Mode>,
        /// Comma-separated margins.
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        margins: Vec<f64>,
        /// Seeds as a list (`1,2,3`) or inclusive range (`1..5`).
        #[arg(long, default_value = "1..5")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with and without the reversal network.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "1..5")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op, layer and loss.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Also write the results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// 1 for invalid input, 2 for runtime failures, 3 for annotator failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    use cure::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::Parse(_) | E::Index(_) | E::Shape(_) | E::LabelingIncomplete(_) => 1,
                E::Client(_) => 3,
                E::Divergence { .. } | E::Degenerate(_) | E::Checkpoint(_) | E::Io(_) | E::Json(_) => 2,
            };
        }
    }
    2
}

fn init_threads(flag: Option<usize>) -> anyhow::Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("CURE_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| cure::Error::Config(format!("CURE_THREADS=`{v}` is not a number")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(cure::Error::Config("thread count must be at least 1".into()).into());
        }
        cure::par::init_threads(n);
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads(cli.threads)?;
    let exec = if cli.sequential { Exec::Sequential } else { Exec::available() };
    match cli.command {
        Command::Generate { spec, sets, seed, out } => commands::generate(spec.as_deref(), &sets, seed, &out),
        Command::Label {
            cfg,
            input,
            backend,
            generator,
            audit,
            out,
        } => commands::label(&cfg, &input, backend, generator, audit, &out, exec),
        Command::Train {
            cfg,
            mode,
            margin,
            resume,
            stop_after,
            out,
        } => commands::train(&cfg, mode, margin, resume, stop_after, &out, exec),
        Command::Eval { run, out } => commands::eval(&run, out, exec),
        Command::Sweep {
            cfg,
            modes,
            margins,
            seeds,
            out,
        } => commands::sweep(&cfg, &modes, &margins, &commands::parse_seeds(&seeds)?, &out, exec),
        Command::Ablate { cfg, seeds, out } => commands::ablate(&cfg, &commands::parse_seeds(&seeds)?, &out, exec),
        Command::GradCheck { seeds, tolerance, out } => commands::grad_check(seeds, tolerance, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
