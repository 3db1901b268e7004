use clap::Parser;

fn main() {
    let cli = mvlq::cli::Cli::parse();
    std::process::exit(mvlq::cli::run(cli));
}
