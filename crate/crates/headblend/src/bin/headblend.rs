use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(headblend::cli::run(std::env::args()) as u8)
}
