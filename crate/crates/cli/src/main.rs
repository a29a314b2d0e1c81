use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use scalemixer_cli::forecast::Origins;
use scalemixer_cli::{ablate, evaluate, exit_code, forecast, load_config, pipeline};
use scalemixer_core::checkpoint::Stage;
use scalemixer_core::data::dataset::Split;
use scalemixer_core::gradcheck::GRAD_TOL;

#[derive(Parser)]
#[command(name = "scalemixer", version, about = "Coupled global/regional forecasting on a synthetic multiscale task")]
struct Cli {
    /// Run configuration (TOML); desk defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    Stage::parse(s).ok_or_else(|| format!("unknown stage `{s}` (pretrain-global, one-step, rollout-ft)"))
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::ALL.into_iter().find(|sp| sp.name() == s).ok_or_else(|| format!("unknown split `{s}` (train, val, test)"))
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint of the preceding stage.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out a trained model from one origin or a whole split.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Coupled 6 h steps.
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, conflicts_with = "split")]
        origin: Option<usize>,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        #[arg(long)]
        skip_csv: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score forecasts against truth.
    Eval {
        #[arg(long)]
        forecast: PathBuf,
        /// Dataset directory holding the truth.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        stations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable site.
    Gradcheck {
        #[arg(long, default_value_t = GRAD_TOL)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and compare the ablation variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Pretrained global checkpoint.
        #[arg(long)]
        global: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let seed = cli.seed;
    match cli.command {
        Command::GenData { out } => {
            pipeline::gen_data(&cfg, seed, &out)?;
            println!("dataset written to {}", out.display());
        }
        Command::Train { stage, data, init, out } => {
            let s = pipeline::train(&cfg, seed, stage, &data, init.as_deref(), &out)?;
            for (k, v) in &s.entries {
                println!("{k} = {v}");
            }
        }
        Command::Forecast { checkpoint, data, steps, origin, split, skip_csv, out } => {
            let origins = match (origin, split) {
                (Some(h), _) => Origins::Hour(h),
                (None, Some(s)) => Origins::Split(s),
                (None, None) => Origins::Split(Split::Test),
            };
            let dirs = forecast::forecast(&checkpoint, &data, origins, steps, !skip_csv, seed, &out)?;
            println!("{} forecasts written to {}", dirs.len(), out.display());
        }
        Command::Eval { forecast, truth, stations, out } => {
            let report = evaluate::evaluate(&forecast, &truth, stations.as_deref(), None)?;
            print!("{}", evaluate::write_report(&report, &out, &cfg.hash())?);
        }
        Command::Gradcheck { tol, out } => {
            pipeline::gradcheck(&cfg, seed, tol, out.as_deref(), |r, ok| {
                println!("{:<40} {:>12.3e} {:>6} {}", r.name, r.worst_rel_err, r.checked, if ok { "ok" } else { "FAIL" });
            })?;
        }
        Command::Ablate { data, global, out } => {
            let outcome = ablate::ablate(&cfg, seed, &data, &global, &out, |r| {
                eprintln!("{} trained in {:.1} s", r.scores.variant.label(), r.train_seconds);
            })?;
            print!("{}", outcome.table);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
