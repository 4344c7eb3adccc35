use std::process::ExitCode;

use clap::Parser;
use cmml::bench::CountingAlloc;
use cmml::cli::{execute, split_overrides, Cli};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args_os());
    let cli = Cli::parse_from(args);
    let result = cli
        .config(&overrides)
        .and_then(|cfg| execute(cli.command, &cfg, cli.checkpoint.as_deref()));
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
