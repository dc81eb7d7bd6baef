use std::process::ExitCode;

use action_kit::cli::{run, EXIT_USAGE};

const THREADS_ENV: &str = "ACTION_KIT_THREADS";

fn main() -> ExitCode {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n = match v.parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got {v:?}");
                return ExitCode::from(EXIT_USAGE as u8);
            }
        };
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    }
    ExitCode::from(run(std::env::args_os()) as u8)
}
