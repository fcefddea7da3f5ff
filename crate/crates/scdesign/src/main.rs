use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(scdesign::cli::run() as u8)
}
