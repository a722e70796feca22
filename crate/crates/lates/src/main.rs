use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(lates::cli::run(std::env::args_os()))
}
