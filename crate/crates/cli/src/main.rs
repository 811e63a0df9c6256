use std::process;

use cfm_lab::cli::{configure_threads, run, Cli};
use cfm_lab::error::{EXIT_OK, EXIT_USAGE};
use clap::Parser;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            process::exit(code);
        }
    };
    let result = configure_threads().and_then(|()| run(cli));
    match result {
        Ok(msg) => println!("{msg}"),
        Err(e) => {
            eprintln!("cfm-lab: {e}");
            process::exit(e.exit_code());
        }
    }
}
