use clap::Parser;

fn main() {
    let code = detflow::cli::run(detflow::cli::Cli::parse());
    std::process::exit(code);
}
