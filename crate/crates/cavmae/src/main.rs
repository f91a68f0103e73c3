use std::process::ExitCode;

fn main() -> ExitCode {
    cavmae::cli::main_entry()
}
