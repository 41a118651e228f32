//! `peelnet` command line.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "peelnet",
    version,
    about = "Learn Gaussian DAGs with unspecified interventions and test directed edges and pathways"
)]
pub struct Cli {
    /// Worker threads for nodewise fits, replicates and simulations.
    #[arg(long, global = true, env = "PEELNET_THREADS")]
    pub threads: Option<usize>,

    /// TOML file whose values override command-line flags. Top-level keys
    /// are global flags; a table per subcommand holds its flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Log verbosity (repeat for more).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Draw a truth and data from the simulation design.
    Simulate(SimulateArgs),
    /// Learn the super-graph, optionally refit coefficients.
    Learn(LearnArgs),
    /// Test H0: every hypothesized edge is absent.
    TestEdge(TestArgs),
    /// Test H0: at least one hypothesized edge is absent.
    TestPath(TestArgs),
    /// Structural Hamming distance between two edge lists.
    Eval(EvalArgs),
    /// Rejection-rate experiment from a TOML or JSON design file.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// CSV of primary variables, n rows by p columns.
    #[arg(long, value_name = "CSV")]
    pub y: PathBuf,
    /// CSV of interventions, n rows by q columns.
    #[arg(long, value_name = "CSV")]
    pub x: PathBuf,
    /// Input CSVs start with a header row.
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true", default_value_t = false)]
    pub headers: bool,
}

#[derive(Args, Debug, Clone)]
pub struct GridArgs {
    /// Truncation levels tried by BIC.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_values_t = [0.05, 0.1, 0.15])]
    pub taus: Vec<f64>,
    /// Explicit penalty values; derived from the data when absent.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',')]
    pub gammas: Vec<f64>,
    /// Size of the derived penalty grid.
    #[arg(long, default_value_t = 100)]
    pub gamma_count: usize,
    /// Largest sparsity budget tried by BIC.
    #[arg(long, default_value_t = 30)]
    pub kappa_max: usize,
    /// Require a single nonzero in every instrument row.
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true", default_value_t = false)]
    pub strict_instruments: bool,
    /// Only look for ancestral links one layer down.
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true", default_value_t = false)]
    pub adjacent_layers_only: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GraphArg {
    Random,
    Hub,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SetupArg {
    A,
    B,
    C,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub p: usize,
    #[arg(long)]
    pub q: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long, value_enum, default_value_t = GraphArg::Random)]
    pub graph: GraphArg,
    #[arg(long, value_enum, default_value_t = SetupArg::A)]
    pub setup: SetupArg,
    /// AR(1) correlation of the interventions.
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    pub x_corr: f64,
    /// Noise variance of the first node.
    #[arg(long, default_value_t = 0.5)]
    pub sigma2_min: f64,
    /// Noise variance of the last node.
    #[arg(long, default_value_t = 1.0)]
    pub sigma2_max: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for x.csv, y.csv, truth.json, supergraph.json and edges.json.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct LearnArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Directory for supergraph.json and trace.json.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Also write the reduced-form estimate as v_hat.csv.
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true", default_value_t = false)]
    pub dump_v: bool,
    /// Refit coefficients: u_hat.csv, w_hat.csv and edges.json.
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true", default_value_t = false)]
    pub refit: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Dp,
    Asymptotic,
    Both,
}

#[derive(Args, Debug)]
pub struct TestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    /// JSON list of 1-based pairs `[[k, j], ...]`, or `{"edges": [...]}`.
    #[arg(long, value_name = "JSON")]
    pub hypothesis: PathBuf,
    /// Level used for the reject/accept line in the summary.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Perturbation replicates.
    #[arg(long, default_value_t = 500)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use this super-graph instead of learning one.
    #[arg(long, value_name = "JSON")]
    pub oracle_supergraph: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::Dp)]
    pub method: MethodArg,
    /// Normal limit for the asymptotic p-value with 50 or more edges.
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true", default_value_t = false)]
    pub normal_approximation: bool,
    /// Start replicate fits at the original fixed point.
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true", default_value_t = true)]
    pub warm_start: bool,
    /// Report path; the JSON goes to stdout when absent.
    #[arg(long, value_name = "JSON")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Estimated edge list (JSON).
    #[arg(long, value_name = "JSON")]
    pub estimate: PathBuf,
    /// True edge list (JSON).
    #[arg(long, value_name = "JSON")]
    pub truth: PathBuf,
    /// Write the result here instead of stdout.
    #[arg(long, value_name = "JSON")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// Experiment design (`.toml` or `.json`).
    #[arg(long, value_name = "FILE")]
    pub design: PathBuf,
    /// CSV table of rejection rates.
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
}

fn command() -> clap::Command {
    Cli::command().args_override_self(true)
}

/// Parses the command line, then re-parses with config-file values appended
/// so that they take precedence.
fn parse(argv: Vec<OsString>) -> Result<Cli, clap::Error> {
    let matches = command().try_get_matches_from(&argv)?;
    let first = Cli::from_arg_matches(&matches)?;
    let Some(path) = first.config.clone() else {
        return Ok(first);
    };
    let name = matches.subcommand_name().unwrap_or_default().to_string();
    let extra = config::config_args(&path, &name)
        .map_err(|msg| command().error(clap::error::ErrorKind::InvalidValue, format!("config file: {msg}")))?;
    let mut full = argv;
    full.extend(extra.into_iter().map(OsString::from));
    let matches = command().try_get_matches_from(&full)?;
    Cli::from_arg_matches(&matches)
}

fn main() -> ExitCode {
    let cli = match parse(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(args: &[&str]) -> Vec<OsString> {
        std::iter::once("peelnet").chain(args.iter().copied()).map(OsString::from).collect()
    }

    #[test]
    fn cli_is_well_formed() {
        command().debug_assert();
    }

    #[test]
    fn bool_flags_accept_values() {
        let cli = parse(argv(&["learn", "--y", "a", "--x", "b", "--out-dir", "o", "--refit", "--headers=false"])).unwrap();
        let Command::Learn(a) = cli.command else { panic!() };
        assert!(a.refit);
        assert!(!a.data.headers);
        assert!(!a.dump_v);
        assert_eq!(a.grid.taus, vec![0.05, 0.1, 0.15]);
    }

    #[test]
    fn config_overrides_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        std::fs::write(&cfg, "[test-edge]\nalpha = 0.1\ntaus = [0.2]\nwarm-start = false\n").unwrap();
        let cli = parse(argv(&[
            "test-edge",
            "--y",
            "a",
            "--x",
            "b",
            "--hypothesis",
            "h",
            "--alpha",
            "0.01",
            "--taus",
            "0.05,0.1",
            "--config",
            cfg.to_str().unwrap(),
        ]))
        .unwrap();
        let Command::TestEdge(a) = cli.command else { panic!() };
        assert_eq!(a.alpha, 0.1);
        assert_eq!(a.grid.taus, vec![0.2]);
        assert!(!a.warm_start);
    }

    #[test]
    fn unknown_config_key_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        std::fs::write(&cfg, "[eval]\nbogus = 1\n").unwrap();
        let err = parse(argv(&["eval", "--estimate", "a", "--truth", "b", "--config", cfg.to_str().unwrap()])).unwrap_err();
        assert!(err.use_stderr());
    }
}
