use clap::Parser;
use convdrop_cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
