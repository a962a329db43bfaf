use std::process::ExitCode;

fn main() -> ExitCode {
    simloss_cli::run(std::env::args_os())
}
