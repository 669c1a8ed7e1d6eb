use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use autoopt::Error;
use autoopt_harness::check::cmd_check;
use autoopt_harness::config::{extract_key_overrides, Settings};
use autoopt_harness::grid::cmd_grid;
use autoopt_harness::oracle::cmd_oracle;
use autoopt_harness::train::cmd_train;
use clap::{Args, Parser, Subcommand};

const EXIT_DIVERGED: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;

/// AutoOpt experiment runner.
///
/// Any configuration key can also be given as `--dotted.key VALUE`, for
/// example `--controller.ridge 1e-6` or `--data.test_subset 2000`.
#[derive(Parser)]
#[command(name = "autoopt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed.
    Train(Common),
    /// Fixed-hyperparameter grid over `grid.alphas` x `grid.betas`.
    Grid(Common),
    /// Compare analytic, brute-force and estimated oracle gamma on random
    /// quadratics.
    Oracle(Common),
    /// Run the self-check suites.
    Check(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed; repeat for several.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    /// Training-set subset size.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    upsilon: Option<f64>,
    #[arg(long)]
    precision: Option<String>,
}

impl Common {
    fn settings(&self, overrides: &[(String, String)]) -> Result<Settings> {
        let mut s = match &self.config {
            Some(path) => Settings::from_file(path)?,
            None => Settings::default(),
        };
        if s.get("data.dir").is_none() {
            if let Ok(dir) = std::env::var("AUTOOPT_MNIST_DIR") {
                if s.get("dataset").is_none_or(|d| d == "mnist") && self.dataset.as_deref().is_none_or(|d| d == "mnist") {
                    s.set("data.dir", dir)?;
                }
            }
        }
        if !self.seeds.is_empty() {
            let list: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
            s.set("seeds", list.join(","))?;
        }
        let flags: [(&str, Option<String>); 11] = [
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("dataset", self.dataset.clone()),
            ("data.train_subset", self.subset.map(|v| v.to_string())),
            ("optimizer.name", self.optimizer.clone()),
            ("mode", self.mode.clone()),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("beta", self.beta.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("controller.upsilon", self.upsilon.map(|v| v.to_string())),
            ("precision", self.precision.clone()),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                s.set(key, v)?;
            }
        }
        for (key, value) in overrides {
            s.set(key, value.clone())?;
        }
        Ok(s)
    }
}

/// Flags clap owns; everything else that names a configuration key is a
/// dotted override.
const RESERVED: &[&str] = &["out", "dataset", "mode", "alpha", "beta", "epochs", "precision"];

fn run() -> Result<ExitCode> {
    let (args, overrides) = extract_key_overrides(std::env::args().collect(), RESERVED)?;
    let cli = Cli::parse_from(args);
    match cli.command {
        Command::Train(c) => {
            let cfg = c.settings(&overrides)?.build()?;
            let report = cmd_train(&cfg)?;
            for (seed, err) in cfg.seeds.iter().zip(report.final_test_errors()) {
                println!("seed {seed}: test error {:.4}", err);
            }
        }
        Command::Grid(c) => {
            let cfg = c.settings(&overrides)?.build()?;
            let report = cmd_grid(&cfg)?;
            if let Some(best) = report.rows.iter().find(|r| r.best) {
                println!(
                    "best alpha {} beta {}: test error {:.4} +- {:.4}",
                    best.alpha, best.beta, best.test_error_mean, best.test_error_std
                );
            }
        }
        Command::Oracle(c) => {
            let cfg = c.settings(&overrides)?.build()?;
            let report = cmd_oracle(&cfg)?;
            let agree = report.rows.iter().filter(|r| r.agree).count();
            println!("{agree}/{} cases agree", report.rows.len());
            if agree < report.rows.len() {
                return Ok(ExitCode::from(EXIT_CHECK_FAILED));
            }
        }
        Command::Check(c) => {
            let cfg = c.settings(&overrides)?.build()?;
            let report = cmd_check(&cfg.out, cfg.seeds[0])?;
            for s in &report.suites {
                println!("{} {}", if s.passed { "PASS" } else { "FAIL" }, s.suite);
            }
            if !report.passed {
                return Ok(ExitCode::from(EXIT_CHECK_FAILED));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if matches!(e.downcast_ref::<Error>(), Some(Error::Divergence { .. })) {
                ExitCode::from(EXIT_DIVERGED)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
