use std::process::ExitCode;

fn main() -> ExitCode {
    bnn_core::cli::main()
}
