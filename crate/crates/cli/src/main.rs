use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scalebayes::config::{AcceptanceConfig, AnyConfig, ExperimentConfig};
use scalebayes::dataset::{generate, Dataset};
use scalebayes::error::{HarnessError, Result};
use scalebayes::{draws, experiments, runner};

#[derive(Parser)]
#[command(name = "scalebayes", version, about = "Scalable Bayesian inference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with its ground truth.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `data_seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment or an acceptance criterion.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the algorithm seed (or the criterion seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute diagnostics from a stored draw file.
    Diagnose {
        /// Path to `draws.bin` or its `draws.json` sidecar.
        #[arg(long)]
        draws: PathBuf,
        /// Leading rows of every chain to leave out.
        #[arg(long, default_value_t = 0)]
        warmup: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a run summary with a dataset's analytic posterior.
    Compare {
        #[arg(long)]
        summary: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).unwrap_or_default() + "\n"
}

fn out_dir(flag: Option<PathBuf>, config: Option<PathBuf>) -> PathBuf {
    flag.or(config).unwrap_or_else(|| PathBuf::from("out"))
}

fn run_experiment(cfg: &mut ExperimentConfig, config_path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = out_dir(out, cfg.out.clone());
    let ds = runner::load_dataset(cfg, config_path.parent())?;
    let art = runner::execute(cfg, &ds)?;
    runner::write_artifacts(&dir, &art)?;
    println!("wrote {}", dir.display());
    match art.failure {
        Some(f) => Err(HarnessError::Core(scalebayes_core::Error::Numeric(f))),
        None => Ok(()),
    }
}

fn run_acceptance(cfg: &AcceptanceConfig, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let report = experiments::run_criterion(usize::from(cfg.criterion), Some(seed.unwrap_or(cfg.seed)))?;
    println!("{}", report.line());
    print!("{}", report.details());
    let dir = out_dir(out, cfg.out.clone());
    write(&dir.join(format!("criterion_{:02}.json", cfg.criterion)), &pretty(&report.to_value()))?;
    if report.passed() {
        Ok(())
    } else {
        Err(HarnessError::CheckFailed(format!("criterion {} did not pass", cfg.criterion)))
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, seed, out } => {
            let AnyConfig::Experiment(cfg) = AnyConfig::parse(&read(&config)?)? else {
                return Err(HarnessError::Usage("generate needs an experiment config".into()));
            };
            let ds = generate(&cfg.model, seed.unwrap_or(cfg.data_seed))?;
            let path = out_dir(out, cfg.out).join("dataset.json");
            write(&path, &ds.to_json())?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Run { config, seed, out } => match AnyConfig::parse(&read(&config)?)? {
            AnyConfig::Experiment(mut cfg) => run_experiment(&mut cfg, &config, seed, out),
            AnyConfig::Acceptance(cfg) => run_acceptance(&cfg, seed, out),
        },
        Command::Diagnose { draws: path, warmup, out } => {
            let chains: Vec<_> = draws::read(&path)?.iter().map(|c| c.tail(warmup)).collect();
            if chains.is_empty() || chains[0].is_empty() {
                return Err(HarnessError::Usage("draw file holds no draws".into()));
            }
            let csv = runner::diagnostics_table(&chains)?;
            match out {
                Some(dir) => write(&dir.join("diagnostics.csv"), &csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Compare { summary, dataset, out } => {
            let summary: serde_json::Value = scalebayes::config::parse_json(&read(&summary)?)?;
            let ds = Dataset::parse(&read(&dataset)?)?;
            let text = pretty(&runner::compare(&summary, &ds)?);
            match out {
                Some(dir) => write(&dir.join("compare.json"), &text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
