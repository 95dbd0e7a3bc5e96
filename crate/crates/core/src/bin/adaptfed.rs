use std::process::ExitCode;

fn main() -> ExitCode {
    adaptfed::cli::main_with_args(std::env::args_os())
}
