use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use prefsamp::experiment::{
    cmd_dependence, cmd_fit, cmd_pipeline, cmd_predict, cmd_simulate, run_pipeline,
    ExperimentConfig, Profile,
};

#[derive(Parser)]
#[command(
    name = "prefsamp",
    about = "Bivariate geostatistical modeling under preferential sampling",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Iteration/grid preset overriding the config values.
    #[arg(long, global = true, value_enum)]
    profile: Option<ProfileArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Smoke,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and persist it with its truth record.
    Simulate,
    /// Fit the configured models to the full dataset; export traces.
    Fit,
    /// Fit on the first holdout's training set and export predictive draws.
    Predict,
    /// Fit, predict and score every model x holdout cell.
    Score,
    /// Biased-subsample cross-covariance dependence analysis.
    Dependence,
    /// Scores plus dependence analysis when configured.
    Pipeline,
}

fn load_config(cli: &Cli) -> prefsamp::Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| prefsamp::Error::Config("--config <path> is required".into()))?;
    let mut config = ExperimentConfig::from_toml_file(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(profile) = cli.profile {
        config.apply_profile(match profile {
            ProfileArg::Smoke => Profile::Smoke,
            ProfileArg::Paper => Profile::Paper,
        });
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let outcome = match cli.command {
        Command::Simulate => cmd_simulate(&config).map(|()| 0usize),
        Command::Fit => cmd_fit(&config).map(|()| 0),
        Command::Predict => cmd_predict(&config).map(|()| 0),
        Command::Score => run_pipeline(&config).map(|r| r.n_failed),
        Command::Dependence => cmd_dependence(&config).map(|()| 0),
        Command::Pipeline => cmd_pipeline(&config),
    };
    match outcome {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("{n} cell(s) failed; see errors.csv");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
