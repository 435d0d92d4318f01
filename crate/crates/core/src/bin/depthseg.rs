use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use depthseg::cli::{error_line, exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code == 0 {
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", error_line(2, "usage", &e.kind().to_string()));
            return ExitCode::from(2);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = match err.downcast_ref::<depthseg::Error>() {
                Some(e) => (exit_code(e), e.kind()),
                None => (2, "internal"),
            };
            eprintln!("error: {err:#}");
            eprintln!("{}", error_line(code, kind, &format!("{err:#}")));
            ExitCode::from(code as u8)
        }
    }
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    let threads = cli.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building the worker pool")?;
    pool.install(|| run(cli))?;
    Ok(())
}
