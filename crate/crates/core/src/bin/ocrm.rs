use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ocrm::config::{parse_config, Experiment};
use ocrm::run::{evaluate_checkpoint, run};
use ocrm::Error;

#[derive(Parser)]
#[command(name = "ocrm", version, about = "Importance-weighted reward model retraining inside a PPO loop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file. Every key is optional.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Run seed; overrides `seed` in the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` in the file.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// `key.path=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a preference dataset from the SFT policy.
    DatasetGen(Common),
    /// Standard PPO against one reward model for the full budget.
    TrainPpo(Common),
    /// The iterated loop with importance-weighted reward model retraining.
    TrainOcrm(Common),
    /// Every variant in `ablation.variants` on a shared dataset.
    Ablation(Common),
    /// Consistency sweep on the discrete task.
    Consistency(Common),
    /// Score a saved policy checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
        /// Reward model checkpoint; adds RM score and accuracy.
        #[arg(long)]
        rm: Option<PathBuf>,
    },
}

fn overrides(experiment: Option<Experiment>, common: &Common) -> Vec<String> {
    let mut all = Vec::new();
    if let Some(e) = experiment {
        all.push(format!("experiment=\"{e}\""));
    } else {
        all.push("experiment=\"didactic-ocrm\"".to_string());
    }
    all.extend(common.overrides.iter().cloned());
    if let Some(seed) = common.seed {
        all.push(format!("seed={seed}"));
    }
    if let Some(out) = &common.out {
        all.push(format!("out_dir={:?}", out.display().to_string()));
    }
    all
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, common) = match &cli.command {
        Command::DatasetGen(c) => (Some(Experiment::DatasetGen), c),
        Command::TrainPpo(c) => (Some(Experiment::DidacticPpo), c),
        Command::TrainOcrm(c) => (Some(Experiment::DidacticOcrm), c),
        Command::Ablation(c) => (Some(Experiment::Ablation), c),
        Command::Consistency(c) => (Some(Experiment::Consistency), c),
        Command::Eval { common, .. } => (None, common),
    };
    let result = parse_config(common.config.as_deref(), &overrides(experiment, common)).and_then(|cfg| {
        match &cli.command {
            Command::Eval { policy, rm, .. } => {
                let report = evaluate_checkpoint(&cfg, policy, rm.as_deref())?;
                print!("{}", toml::to_string(&report).map_err(|e| Error::Config(e.to_string()))?);
            }
            _ => print!("{}", run(&cfg)?.text()),
        }
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
