use clap::Parser;
use tracing_subscriber::EnvFilter;

use coo_cli::{execute, exit_code, Cli};

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("COO_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    if let Err(err) = execute(&cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err) as i32);
    }
}
