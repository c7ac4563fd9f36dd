use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use log::{error, info};
use segeval_cli::{run_with_pool, write_report, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let start = Instant::now();
    let report = match run_with_pool(&cli) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    let elapsed = start.elapsed();
    let workers = rayon::current_num_threads();
    let workers = if cli.workers == 0 {
        workers
    } else {
        cli.workers
    };
    info!(
        "wall time {:.3} s on {workers} worker(s)",
        elapsed.as_secs_f64()
    );

    let text = report.render(cli.format);
    print!("{text}");
    if let Some(path) = &cli.report {
        if let Err(e) = write_report(path, &text, elapsed, workers) {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    }
    match report.failure {
        Some(msg) => {
            error!("{msg}");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
        None => ExitCode::SUCCESS,
    }
}
