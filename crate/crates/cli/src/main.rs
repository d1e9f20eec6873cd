use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(metadepth_cli::run(std::env::args_os()) as u8)
}
