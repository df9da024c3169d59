use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use lir::cli::{self, RunConfig};

#[derive(Parser)]
#[command(name = "lir", version, about = "Out-of-distribution detection from intermediate-layer energies")]
struct Opts {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// key = value run configuration
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed to run; repeatable, overrides `seeds` in the config
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Let the best-hidden-layer oracle also pick the logits
    #[arg(long)]
    include_logits: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic tasks and write them as CSV
    Gen(RunArgs),
    /// Train one classifier per seed
    Train(RunArgs),
    /// Extract energies, fit detectors and write reports
    Eval(RunArgs),
    /// Score an energy file with a saved detector
    Score {
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        energies: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn load(args: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&args.config)?;
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
    }
    cfg.include_logits |= args.include_logits;
    let out = cfg.out_dir(args.out.as_deref())?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok((cfg, out))
}

fn run(opts: Opts) -> Result<()> {
    match opts.cmd {
        Cmd::Gen(a) => {
            let (cfg, out) = load(&a)?;
            cli::cmd_gen(&cfg, &out)
        }
        Cmd::Train(a) => {
            let (cfg, out) = load(&a)?;
            cli::cmd_train(&cfg, &out).map(|_| ())
        }
        Cmd::Eval(a) => {
            let (cfg, out) = load(&a)?;
            for e in cli::cmd_eval(&cfg, &out)? {
                log::info!("seed {}: ID accuracy {:.4}", e.seed, e.id_accuracy);
            }
            Ok(())
        }
        Cmd::Score {
            detector,
            energies,
            threshold,
        } => {
            let stdout = std::io::stdout();
            cli::cmd_score(&detector, &energies, threshold, std::io::BufWriter::new(stdout.lock()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LIR_LOG", "warn")).init();
    match run(Opts::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
