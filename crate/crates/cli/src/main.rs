//! Experiment runner CLI: dataset generation, method runs, covariance
//! diagnostics, and report recomputation.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use fediptw_core::experiment::{
    diagnose, generate_datasets, report, run_experiment, ExperimentConfig, Method,
};

#[derive(Parser)]
#[command(name = "fediptw", version, about = "Federated ITE estimation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML). Defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Method variant, overriding the config.
    #[arg(long)]
    method: Option<String>,

    /// Base seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads (0 = all cores), overriding the config.
    #[arg(long)]
    jobs: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("stage config: loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = &self.method {
            cfg.method = Method::from_str(m).context("stage config")?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        cfg.validate().context("stage config")?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic replication CSVs and their ground-truth sidecars.
    Generate(ConfigArgs),
    /// Run the configured experiment end to end.
    Run(ConfigArgs),
    /// Tabulate covariance diagnostics across completed runs.
    Diagnose {
        /// Run directories to compare.
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Where to write the table (defaults to stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the aggregate metric table from per-repeat files.
    Report {
        run_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate(args) => {
            let cfg = args.resolve()?;
            let files = generate_datasets(&cfg).context("stage generate")?;
            for f in &files {
                println!("{}", f.display());
            }
            eprintln!("wrote {} replication(s)", files.len());
        }
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let summary = run_experiment(&cfg).context("stage run")?;
            println!(
                "method={} repeats={} rotations={}",
                summary.aggregate.method, summary.aggregate.n_repeats, summary.aggregate.rotations
            );
            for (name, stat) in &summary.aggregate.stats {
                println!("{name}: {:.6} +/- {:.6} (n={})", stat.mean, stat.std, stat.n);
            }
            println!("outputs: {}", summary.out_dir.display());
        }
        Command::Diagnose { run_dirs, out } => {
            let table = diagnose(&run_dirs, out.as_deref()).context("stage diagnose")?;
            print!("{table}");
        }
        Command::Report { run_dir } => {
            let agg = report(&run_dir).context("stage report")?;
            for (name, stat) in &agg.stats {
                println!("{name}: {:.6} +/- {:.6} (n={})", stat.mean, stat.std, stat.n);
            }
        }
    }
    Ok(())
}
