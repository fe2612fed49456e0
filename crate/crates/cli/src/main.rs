mod commands;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sca_core::data::{Split, SynthConfig};

use crate::commands::{SynthArgs, TrainArgs};
use crate::error::CliResult;

#[derive(Parser)]
#[command(name = "sca", version, about = "Survival cluster analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write a run directory.
    Train {
        /// TOML file with `TrainConfig` fields; omitted fields keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long, env = "SCA_OUT")]
        out: PathBuf,
        #[arg(long, env = "SCA_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        gamma0: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        /// Pick gamma0 from `gamma0_grid` by validation loss.
        #[arg(long)]
        grid: bool,
    },
    /// Print and store the metric report of one split.
    Evaluate {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Export cluster assignments, responsibilities and per-cluster survival curves.
    Cluster {
        #[arg(long)]
        run: PathBuf,
        /// Fresh CSV to cluster instead of a stored split (needs --schema).
        #[arg(long, requires = "schema")]
        data: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export empirical and model survival curves with Greenwood bands.
    Calibration {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, requires = "schema")]
        data: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic Weibull benchmark.
    Synth {
        #[arg(long, env = "SCA_OUT")]
        out: PathBuf,
        #[arg(long, env = "SCA_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 700)]
        n_per_cluster: usize,
        #[arg(long, default_value_t = 3)]
        clusters: usize,
        #[arg(long, default_value_t = 0.3)]
        censor_fraction: f64,
        #[arg(long, default_value_t = 0)]
        nuisance_groups: usize,
        #[arg(long, default_value_t = 0)]
        nuisance_dims: usize,
        #[arg(long, default_value_t = 0.0)]
        nuisance_shift: f64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, data, schema, out, seed, gamma0, k, grid } => {
            let mut config = run::load_config(config.as_deref())?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(g) = gamma0 {
                config.gamma0 = g;
            }
            if let Some(k) = k {
                config.k = k;
            }
            let manifest = commands::train(TrainArgs { config, data, schema, out: out.clone(), grid })?;
            println!("run written to {} (gamma0 {})", out.display(), manifest.gamma0);
        }
        Command::Evaluate { run, split } => {
            let report = commands::evaluate(&run, split)?;
            let text = serde_json::to_string_pretty(&report).map_err(sca_core::ScaError::from)?;
            println!("{text}");
        }
        Command::Cluster { run, data, schema, split, out } => {
            let data = data.as_deref().zip(schema.as_deref());
            let summary = commands::cluster(&run, data, split, &out)?;
            println!("effective K = {}", summary.effective_k);
            for p in &summary.curve_paths {
                println!("wrote {}", p.display());
            }
        }
        Command::Calibration { run, data, schema, split, out } => {
            let data = data.as_deref().zip(schema.as_deref());
            match commands::calibration(&run, data, split, &out)? {
                Some(s) => println!("calibration slope = {s:.4}"),
                None => println!("calibration slope undefined"),
            }
        }
        Command::Synth {
            out,
            seed,
            n_per_cluster,
            clusters,
            censor_fraction,
            nuisance_groups,
            nuisance_dims,
            nuisance_shift,
        } => {
            let mut config = SynthConfig::new(n_per_cluster, clusters);
            config.censor_fraction = censor_fraction;
            config.nuisance_groups = nuisance_groups;
            config.nuisance_dims = nuisance_dims;
            config.nuisance_shift = nuisance_shift;
            commands::synth(SynthArgs { config, seed, out })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
