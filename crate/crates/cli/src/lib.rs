//! Command line front end for the mean-field BDSDE solvers.
//!
//! Exit status: 0 success, 2 configuration error, 3 solver divergence,
//! 4 iteration limit, 1 anything else. Failures also print one JSON line
//! with the error category on stderr.

pub mod config;
pub mod error;
pub mod ext_f64;
pub mod record;
pub mod run;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{Axis, Command, ConfigEcho, ExperimentConfig, FileConfig, Format, Overrides};
pub use error::{CliError, CliResult};
pub use record::{load, render, Loaded, ResultRecord, Scalar, Series, StudyRow, StudyTable, VERSION};
pub use run::{convergence_study, run};

/// Environment fallback for `--threads`.
pub const THREADS_ENV: &str = "MFBDSDE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "mfbdsde", version, about = "Mean-field BDSDE solvers, SPDE evaluation and mean-field LQ control")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Built-in problem.
    #[arg(long)]
    pub preset: Option<String>,
    /// TOML experiment file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Particle layout `MxK`: M backward-driver groups of K particles.
    #[arg(long, value_parser = config::parse_particles)]
    pub particles: Option<(usize, usize)>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Horizon.
    #[arg(long = "T", id = "horizon")]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Worker threads; falls back to MFBDSDE_THREADS.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Solve the backward equation of a problem.
    Solve(Common),
    /// Solve the forward doubly stochastic equation.
    Forward(Common),
    /// Evaluate the nonlocal SPDE solution at query points.
    SpdeEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        t: Option<f64>,
        /// Comma-separated query points.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Option<Vec<f64>>,
    },
    /// Perturbation, duality and maximum-principle checks at a constant
    /// control.
    ControlCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_hyphen_values = true)]
        u: Option<f64>,
    },
    /// Solve a linear-quadratic problem and verify optimality.
    Lq(Common),
    /// Error against the oracle over a list of steps, particle counts or
    /// perturbation sizes.
    ConvergenceStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Option<Axis>,
        /// Comma-separated axis values (at least three).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Seeds per axis value.
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Run the command named in the config file.
    Run(Common),
}

fn overrides(common: &Common) -> Overrides {
    Overrides {
        preset: common.preset.clone(),
        particles: common.particles,
        steps: common.steps,
        horizon: common.horizon,
        seed: common.seed,
        out: common.out.clone(),
        format: common.format,
        threads: common.threads,
        ..Default::default()
    }
}

fn env_threads() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(s) if !s.trim().is_empty() => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::config(format!("{THREADS_ENV} must be a positive integer, got `{s}`"))),
        _ => Ok(None),
    }
}

/// Resolve the parsed command line into an experiment.
pub fn resolve(cli: &Cli) -> CliResult<ExperimentConfig> {
    let (command, common, ov) = match &cli.cmd {
        Cmd::Solve(c) => (Some(Command::Solve), c, overrides(c)),
        Cmd::Forward(c) => (Some(Command::Forward), c, overrides(c)),
        Cmd::Lq(c) => (Some(Command::Lq), c, overrides(c)),
        Cmd::Run(c) => (None, c, overrides(c)),
        Cmd::SpdeEval { common, t, x } => {
            (Some(Command::SpdeEval), common, Overrides { t: *t, x: x.clone(), ..overrides(common) })
        }
        Cmd::ControlCheck { common, u } => (Some(Command::ControlCheck), common, Overrides { u: *u, ..overrides(common) }),
        Cmd::ConvergenceStudy { common, axis, values, replicates } => (
            Some(Command::ConvergenceStudy),
            common,
            Overrides { axis: *axis, values: values.clone(), replicates: *replicates, ..overrides(common) },
        ),
    };
    let file = match &common.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let mut cfg = ExperimentConfig::resolve(command, &file, &ov)?;
    if cfg.threads.is_none() {
        cfg.threads = env_threads()?;
    }
    if cfg.threads == Some(0) {
        return Err(CliError::config("thread count must be positive"));
    }
    Ok(cfg)
}

/// Resolve, run and write; returns the record that was emitted.
pub fn execute(cli: &Cli) -> CliResult<ResultRecord> {
    let cfg = resolve(cli)?;
    let rec = run(&cfg)?;
    match &cfg.out {
        Some(path) => record::write(&rec, cfg.format, path)?,
        None => {
            let text = render(&rec, cfg.format)?;
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                out.write_all(b"\n")?;
            }
        }
    }
    Ok(rec)
}

/// Entry point of the binary; returns the exit status.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("mfbdsde: {e}");
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
