use clap::Parser;

fn main() {
    sitt::cli::init_logging();
    let cli = sitt::cli::Cli::parse();
    std::process::exit(sitt::cli::run(cli));
}
