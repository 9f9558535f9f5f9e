use std::process::ExitCode;

fn main() -> ExitCode {
    angular_embed::cli::run(std::env::args_os())
}
