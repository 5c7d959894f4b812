use std::process::ExitCode;

fn main() -> ExitCode {
    match tsdf::cli::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // One line, "error: " prefix, so scripts can parse failures.
            let msg = format!("{e:#}").replace('\n', "; ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
