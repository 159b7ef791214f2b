use std::process::ExitCode;

fn main() -> ExitCode {
    turncredit::cli::run(std::env::args().skip(1).collect())
}
