use clap::Parser;

fn main() -> std::process::ExitCode {
    let cli = grit::cli::Cli::parse();
    std::process::ExitCode::from(grit::cli::run(&cli).code())
}
