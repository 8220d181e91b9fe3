use clap::Parser;

fn main() -> std::process::ExitCode {
    let cli = rsfr_cli::cli::Cli::parse();
    match rsfr_cli::cli::run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}
