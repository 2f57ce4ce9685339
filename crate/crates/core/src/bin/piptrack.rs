use std::process::ExitCode;

fn main() -> ExitCode {
    match pips::cli::main_with_args(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.kind == "help" => {
            print!("{}", e.message);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(if e.kind == "usage" { 2 } else { 1 })
        }
    }
}
