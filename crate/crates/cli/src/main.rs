//! `damda` command-line front end.
//!
//! Exit codes: 0 success, 2 unreadable or invalid input, 3 learning failure
//! (degenerate class, no fittable structure), 4 model variables missing from
//! the test header, 5 discovery or selection fit failure, 6 output I/O.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use damda::CovStructure;

use crate::commands::Failure;
use crate::manifest::Recorder;

#[derive(Debug, Parser)]
#[command(name = "damda", version, about = "Class discovery and variable selection with extra test variables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the discriminant model on labelled training data.
    Learn(LearnArgs),
    /// Search for hidden classes in test data.
    Discover(DiscoverArgs),
    /// Greedy variable selection on test data.
    Select(SelectArgs),
    /// Generate a synthetic world, optionally with replicate runs.
    Simulate(SimulateArgs),
    /// Compare two labelings by ARI and matched-class error.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    /// Training CSV with a header row.
    #[arg(long)]
    pub train: PathBuf,
    /// Name of the class-label column.
    #[arg(long)]
    pub labels: String,
    /// Comma-separated covariance structures to try.
    #[arg(long, value_delimiter = ',', default_values_t = CovStructure::ALL)]
    pub structures: Vec<CovStructure>,
    /// Output model JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiscoverArgs {
    /// Learned model JSON.
    #[arg(long)]
    pub model: PathBuf,
    /// Test CSV with a header row.
    #[arg(long)]
    pub test: PathBuf,
    /// Column of the test CSV to ignore (for example ground-truth labels).
    #[arg(long)]
    pub labels: Option<String>,
    /// Hidden-class counts, e.g. `0-4` or `0,2,3`.
    #[arg(long, default_value = "0-4", value_parser = parse_h_range)]
    pub h_range: HRange,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Column of the test CSV to ignore.
    #[arg(long)]
    pub labels: Option<String>,
    /// Selection settings (TOML or JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `h_range` from the config.
    #[arg(long, value_parser = parse_h_range)]
    pub h_range: Option<HRange>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario config (TOML or JSON); the default scenario when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of replicates to run and score; 0 only exports the world.
    #[arg(long, default_value_t = 0)]
    pub runs: usize,
    /// Also run variable selection in each replicate.
    #[arg(long)]
    pub select: bool,
    #[arg(long, default_value = "0-4", value_parser = parse_h_range)]
    pub h_range: HRange,
    /// Worker threads for replicates.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// CSV holding the true labels.
    pub truth: PathBuf,
    /// CSV holding the predicted labels.
    pub pred: PathBuf,
    /// Label column in the truth file (default: its only column, or `class`).
    #[arg(long)]
    pub labels: Option<String>,
    /// Directory for the run manifest.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HRange(pub Vec<usize>);

/// Accepts `a-b` ranges and single values separated by commas.
fn parse_h_range(s: &str) -> Result<HRange, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || format!("bad hidden-class range '{part}'");
        match part.split_once('-') {
            Some((a, b)) => {
                let a: usize = a.trim().parse().map_err(|_| bad())?;
                let b: usize = b.trim().parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err("empty hidden-class range".into());
    }
    out.sort_unstable();
    out.dedup();
    Ok(HRange(out))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DAMDA_LOG", "warn")).init();
    let cli = Cli::parse();
    let (mut rec, outcome) = match cli.command {
        Command::Learn(a) => {
            let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).map_or_else(|| PathBuf::from("."), PathBuf::from);
            let mut rec = Recorder::new("learn", dir);
            let r = commands::learn(&a, &mut rec);
            (rec, r)
        }
        Command::Discover(a) => {
            let mut rec = Recorder::new("discover", a.out.clone());
            let r = commands::discover(&a, &mut rec);
            (rec, r)
        }
        Command::Select(a) => {
            let mut rec = Recorder::new("select", a.out.clone());
            let r = commands::select(&a, &mut rec);
            (rec, r)
        }
        Command::Simulate(a) => {
            let mut rec = Recorder::new("simulate", a.out.clone());
            let r = commands::simulate(&a, &mut rec);
            (rec, r)
        }
        Command::Evaluate(a) => {
            let mut rec = Recorder::new("evaluate", a.out.clone());
            let r = commands::evaluate(&a, &mut rec);
            (rec, r)
        }
    };
    let mut code = match outcome {
        Ok(()) => 0,
        Err(Failure { code, message }) => {
            eprintln!("error: {message}");
            code
        }
    };
    rec.outputs.sort();
    rec.outputs.dedup();
    if let Err(e) = rec.finish(code) {
        eprintln!("error: cannot write run manifest: {e}");
        if code == 0 {
            code = commands::EXIT_OUTPUT;
        }
    }
    ExitCode::from(code)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn h_range_forms() {
        assert_eq!(parse_h_range("0-4").unwrap().0, vec![0, 1, 2, 3, 4]);
        assert_eq!(parse_h_range("3,0-1,1").unwrap().0, vec![0, 1, 3]);
        assert_eq!(parse_h_range("2").unwrap().0, vec![2]);
        assert!(parse_h_range("4-1").is_err());
        assert!(parse_h_range("x").is_err());
        assert!(parse_h_range("").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
