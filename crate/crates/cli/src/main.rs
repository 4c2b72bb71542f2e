mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Command, InputError, RawSettings, RunConfig};

const EXIT_INPUT: u8 = 1;

#[derive(Parser)]
#[command(name = "elliptrim", version, about = "Robust trimmed-likelihood fits of elliptical models")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Fit location and scatter to a CSV file.
    Fit(Flags),
    /// Consistency or rate study on simulated data.
    Simulate(Flags),
    /// Replacement-outlier breakdown study.
    Breakdown(Flags),
    /// Asymptotic efficiency table.
    Efficiency(Flags),
}

#[derive(Args, Default)]
struct Flags {
    /// Flat `key = value` file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV file with a header row.
    #[arg(long)]
    input: Option<String>,
    /// `gaussian` or `t:<nu>`.
    #[arg(long)]
    family: Option<String>,
    /// Enlarge the MVE to this coverage `1 - alpha`.
    #[arg(long)]
    coverage: Option<String>,
    /// Estimator t, c, r or s; repeatable.
    #[arg(long)]
    variant: Vec<String>,
    /// Level of the restricted fit (default: the empirical inside fraction).
    #[arg(long = "alpha-restrict")]
    alpha_restrict: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Monte-Carlo draws: per stratum for fits, total for efficiencies.
    #[arg(long = "mc-budget")]
    mc_budget: Option<String>,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<String>,
    /// `json` or `csv`.
    #[arg(long)]
    format: Option<String>,
    /// MVE resampling subsets.
    #[arg(long = "n-subsets")]
    n_subsets: Option<String>,
    /// Dimension for simulations and efficiency tables.
    #[arg(long)]
    p: Option<String>,
    /// Comma-separated sample sizes.
    #[arg(long = "n-grid")]
    n_grid: Option<String>,
    #[arg(long)]
    replicates: Option<String>,
    /// `clean`, `gem_ring` or `replacement_outliers`.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    pi0: Option<String>,
    #[arg(long)]
    radius: Option<String>,
    #[arg(long)]
    count: Option<String>,
    #[arg(long)]
    magnitude: Option<String>,
    /// `consistency` or `rate`.
    #[arg(long)]
    mode: Option<String>,
    /// Enlargement alpha of an efficiency row (`none` for the plain MVE); repeatable.
    #[arg(long)]
    alpha: Vec<String>,
    /// `mu`, `sigma_diag` or `sigma_offdiag`; repeatable.
    #[arg(long)]
    component: Vec<String>,
    /// `information_ratio` or `inverse_variance`.
    #[arg(long)]
    convention: Option<String>,
    #[arg(long = "blowup-location")]
    blowup_location: Option<String>,
    #[arg(long = "blowup-condition")]
    blowup_condition: Option<String>,
}

impl Flags {
    fn settings(self) -> Result<RawSettings, InputError> {
        let mut raw = RawSettings::new();
        for (k, v) in [
            ("input", self.input),
            ("family", self.family),
            ("coverage", self.coverage),
            ("alpha-restrict", self.alpha_restrict),
            ("seed", self.seed),
            ("mc-budget", self.mc_budget),
            ("out", self.out),
            ("format", self.format),
            ("n-subsets", self.n_subsets),
            ("p", self.p),
            ("n-grid", self.n_grid),
            ("replicates", self.replicates),
            ("scenario", self.scenario),
            ("pi0", self.pi0),
            ("radius", self.radius),
            ("count", self.count),
            ("magnitude", self.magnitude),
            ("mode", self.mode),
            ("convention", self.convention),
            ("blowup-location", self.blowup_location),
            ("blowup-condition", self.blowup_condition),
        ] {
            raw.set_one(k, v);
        }
        raw.set("variant", self.variant);
        raw.set("alpha", self.alpha);
        raw.set("component", self.component);
        Ok(match &self.config {
            Some(path) => raw.over(RawSettings::from_file(path)?),
            None => raw,
        })
    }
}

fn run(cli: Cli) -> Result<i32, InputError> {
    let (command, flags) = match cli.command {
        Sub::Fit(f) => (Command::Fit, f),
        Sub::Simulate(f) => (Command::Simulate, f),
        Sub::Breakdown(f) => (Command::Breakdown, f),
        Sub::Efficiency(f) => (Command::Efficiency, f),
    };
    let cfg = RunConfig::resolve(command, &flags.settings()?)?;
    let out = match command {
        Command::Fit => commands::cmd_fit(&cfg)?,
        Command::Simulate => commands::cmd_simulate(&cfg)?,
        Command::Breakdown => commands::cmd_breakdown(&cfg)?,
        Command::Efficiency => commands::cmd_efficiency(&cfg)?,
    };
    match &cfg.output_path {
        Some(path) => std::fs::write(path, &out.text)
            .map_err(|e| InputError(format!("cannot write {}: {e}", path.display())))?,
        None => print!("{}", out.text),
    }
    Ok(out.status)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(status) => ExitCode::from(status as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}
