use std::process::ExitCode;

use clap::Parser;

use fedlora_cli::config::{parse_config, CliArgs};
use fedlora_cli::runner::run_experiment;
use fedlora_cli::{exit, thread_cap, THREADS_ENV};

fn code(c: i32) -> ExitCode {
    ExitCode::from(c as u8)
}

fn main() -> ExitCode {
    let args = match CliArgs::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                code(exit::CONFIG_ERROR)
            } else {
                code(exit::SUCCESS)
            };
        }
    };

    let threads = match thread_cap(std::env::var(THREADS_ENV).ok().as_deref()) {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return code(exit::CONFIG_ERROR);
        }
    };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size thread pool: {e}");
            return code(exit::RUNTIME_ERROR);
        }
    }

    let cfg = match parse_config(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return code(exit::CONFIG_ERROR);
        }
    };

    match run_experiment(&cfg) {
        Ok(summary) => {
            for m in &summary.methods {
                match m.final_loss {
                    Some(loss) => println!("{:<12} rounds={:<4} final_loss={loss:.6e}", m.method.as_str(), m.rounds),
                    None => println!("{:<12} rounds={:<4} final_loss=-", m.method.as_str(), m.rounds),
                }
            }
            println!("wrote {} files to {}", summary.files.len(), summary.out_dir.display());
            code(exit::SUCCESS)
        }
        Err(e) => {
            eprintln!("error: {e}");
            code(exit::RUNTIME_ERROR)
        }
    }
}
