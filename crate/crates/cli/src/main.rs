use clap::Parser;

fn main() {
    std::process::exit(troupe_cli::run(troupe_cli::Cli::parse()));
}
