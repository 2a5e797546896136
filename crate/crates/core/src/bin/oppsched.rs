use std::process::ExitCode;

fn main() -> ExitCode {
    oppsched::cli::main_with_args(std::env::args_os())
}
