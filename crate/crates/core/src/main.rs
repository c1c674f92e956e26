use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use goexplore_core::cli::{self, CliError, Mode, RunConfig};

#[derive(Parser)]
#[command(name = "goexplore", version, about = "Go-Explore experiments on small grid worlds")]
struct Opts {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Im,
    Ppo,
}

#[derive(Subcommand)]
enum Cmd {
    /// Archive-based exploration phase.
    Explore(RunArgs),
    /// Backward-algorithm robustification of the best archived trajectory.
    Robustify(RunArgs),
    /// Policy-based Go-Explore.
    PolicyGe(RunArgs),
    /// Count-based intrinsic motivation or plain PPO baseline.
    Baseline {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "im")]
        kind: Baseline,
    },
    /// Evaluate a saved policy from reset.
    Evaluate {
        /// Model checkpoint (`model.txt`).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config file supplying the environment.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        /// Sticky-action probability; defaults to the config's value.
        #[arg(long)]
        stickiness: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Take the most likely action instead of sampling.
        #[arg(long)]
        greedy: bool,
    },
    /// Aggregate metrics files into mean/min/max curves.
    Export {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(config: Option<&Path>) -> Result<(RunConfig, String), CliError> {
    match config {
        Some(path) => RunConfig::load(path),
        None => Ok((RunConfig::default(), String::new())),
    }
}

fn run_mode(mode: Mode, args: RunArgs) -> Result<(), CliError> {
    let (mut cfg, text) = load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    for out in cli::run(mode, &cfg, &text, args.resume.as_deref())? {
        println!("{}", out.dir.display());
    }
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Explore(a) => run_mode(Mode::Explore, a),
        Cmd::Robustify(a) => run_mode(Mode::Robustify, a),
        Cmd::PolicyGe(a) => run_mode(Mode::PolicyGe, a),
        Cmd::Baseline { run, kind } => run_mode(
            match kind {
                Baseline::Im => Mode::ImBaseline,
                Baseline::Ppo => Mode::PpoBaseline,
            },
            run,
        ),
        Cmd::Evaluate { checkpoint, config, episodes, stickiness, seed, greedy } => {
            let (cfg, _) = load(config.as_deref())?;
            let model = cli::load_model(&checkpoint)?;
            let r = cli::evaluate(&model, &cfg.env, episodes, stickiness.unwrap_or(cfg.stickiness), seed, greedy)?;
            println!("episodes={} mean={:.4} std_error={:.4} success_rate={:.4}", r.scores.len(), r.mean, r.std_error, r.success_rate);
            Ok(())
        }
        Cmd::Export { metrics, out } => {
            let r = cli::export_files(&metrics, &out)?;
            if r.truncated > 0 {
                eprintln!("warning: runs differ in length; kept {} rows, dropped {}", r.rows, r.truncated);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Opts::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
