//! Experiment runner for the federated LoRA aggregation library.
//!
//! [`config`] resolves a JSON file plus flag overrides into a validated
//! [`RunConfig`](config::RunConfig); [`runner`] executes each requested
//! method on the shared task and writes the report files.

pub mod config;
pub mod runner;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG_ERROR: i32 = 1;
    pub const RUNTIME_ERROR: i32 = 2;
}

/// Environment variable capping worker threads (`0` or unset = automatic).
pub const THREADS_ENV: &str = "FEDLORA_THREADS";

/// Parses the thread cap; `None` means let rayon decide.
pub fn thread_cap(value: Option<&str>) -> Result<Option<usize>, String> {
    match value.map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => match v.parse::<usize>() {
            Ok(0) => Ok(None),
            Ok(n) => Ok(Some(n)),
            Err(_) => Err(format!("{THREADS_ENV} must be a non-negative integer, got `{v}`")),
        },
    }
}
