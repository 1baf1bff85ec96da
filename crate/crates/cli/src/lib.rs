//! Experiment harness behind the `obda` command line tool.

pub mod commands;
pub mod config;

use obda_core::Error;

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_INTEGRITY: i32 = 5;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Integrity(_) => EXIT_INTEGRITY,
        Error::Input(_) | Error::Protocol(_) | Error::Annotation { .. } | Error::Io { .. } | Error::Image(_) => EXIT_INPUT,
    }
}
