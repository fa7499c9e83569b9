use std::process::ExitCode;

fn main() -> ExitCode {
    epsoracle::cli::run(std::env::args_os())
}
