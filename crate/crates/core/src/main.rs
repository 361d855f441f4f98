use clap::Parser;

use rfdarts::cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    let outcome = run(&cli);
    if let Err(e) = &outcome {
        eprintln!("error: {e}");
    }
    std::process::exit(exit_code(&outcome));
}
