//! `gacoop`: generate synthetic feature banks, train prompts, evaluate and
//! compare strategies.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | usage error (bad flags or arguments) |
//! | 2 | I/O error (missing or unreadable files) |
//! | 3 | format error (bad magic, version, truncated or invalid bank) |
//! | 4 | configuration error, including dimension mismatches |
//! | 5 | numeric abort (non-finite values, broken numeric contract) |
//! | 6 | property violation reported by `grad-check` |

mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind as ClapErrorKind;
use clap::Parser;
use gacoop_core::ErrorKind;

use commands::Cli;

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Io => 2,
        ErrorKind::Format => 3,
        ErrorKind::Config => 4,
        ErrorKind::Numeric => 5,
        ErrorKind::Property => 6,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
