use std::process::ExitCode;

fn main() -> ExitCode {
    hybridtrain::harness::run(std::env::args_os())
}
