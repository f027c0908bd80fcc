use clap::Parser;

fn main() {
    std::process::exit(riskstop::cli::main_with(riskstop::cli::Cli::parse()));
}
