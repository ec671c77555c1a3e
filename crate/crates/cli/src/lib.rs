//! Library side of the `gcpool` command-line tool.

pub mod commands;
pub mod config;
pub mod svg;

use commands::CheckFailed;
use config::ConfigError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Exit status for an error: 1 validation, 2 numerical check, 3 I/O.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<CheckFailed>().is_some() {
            return EXIT_NUMERICAL;
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_VALIDATION;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<csv::Error>().is_some() {
            return EXIT_IO;
        }
        if let Some(e) = cause.downcast_ref::<gcpool::Error>() {
            return match e {
                gcpool::Error::Io(_) | gcpool::Error::Parse { .. } => EXIT_IO,
                gcpool::Error::NonFinite(_) | gcpool::Error::SolverFailure { .. } => EXIT_NUMERICAL,
                _ => EXIT_VALIDATION,
            };
        }
    }
    EXIT_VALIDATION
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let io: anyhow::Error = std::io::Error::new(std::io::ErrorKind::NotFound, "gone").into();
        assert_eq!(exit_code(&io.context("loading")), EXIT_IO);
        let parse: anyhow::Error = gcpool::Error::Parse { offset: 0, message: "x".into() }.into();
        assert_eq!(exit_code(&parse), EXIT_IO);
        assert_eq!(exit_code(&anyhow::Error::new(CheckFailed("bad".into()))), EXIT_NUMERICAL);
        assert_eq!(exit_code(&anyhow::Error::new(ConfigError(vec![]))), EXIT_VALIDATION);
        assert_eq!(exit_code(&gcpool::Error::NonFinite("loss").into()), EXIT_NUMERICAL);
    }
}
