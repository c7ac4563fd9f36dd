//! Command-line front end: each subcommand loads the files named by a
//! manifest, runs one of the `segeval-core` stages over a worker pool and
//! returns a [`Report`].

pub mod args;
pub mod commands;
pub mod data;
pub mod losscheck;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};

pub use args::{Cli, Command};
pub use commands::{cmd_assign, cmd_cluster, cmd_distmatch, cmd_evaluate, cmd_match, cmd_stats};
pub use losscheck::cmd_losscheck;
pub use report::{Format, Report, Value};

/// Runs the selected subcommand on the current rayon pool.
pub fn run(cli: &Cli) -> Result<Report> {
    match &cli.command {
        Command::Evaluate(a) => cmd_evaluate(a, cli.seed),
        Command::Match(a) => cmd_match(a, cli.seed),
        Command::Cluster(a) => cmd_cluster(a, cli.seed),
        Command::Assign(a) => cmd_assign(a, cli.seed),
        Command::Distmatch(a) => cmd_distmatch(a, cli.seed),
        Command::Losscheck(a) => cmd_losscheck(a, cli.seed),
        Command::Stats(a) => cmd_stats(a, cli.seed),
    }
}

/// Runs `cli` on a pool of `cli.workers` threads.
pub fn run_with_pool(cli: &Cli) -> Result<Report> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .context("building the worker pool")?;
    pool.install(|| run(cli))
}

pub fn timing_path(report: &Path) -> PathBuf {
    let mut name = report.as_os_str().to_owned();
    name.push(".timing");
    PathBuf::from(name)
}

/// Writes the report and its timing sidecar. Wall time and worker count
/// stay out of the report so reruns are byte-identical.
pub fn write_report(path: &Path, text: &str, elapsed: Duration, workers: usize) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing report {}", path.display()))?;
    let timing = format!(
        "wall_time_s: {:.6}\nworkers: {workers}\n",
        elapsed.as_secs_f64()
    );
    let side = timing_path(path);
    std::fs::write(&side, timing).with_context(|| format!("writing {}", side.display()))
}
