use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(p3m::cli::run() as u8)
}
