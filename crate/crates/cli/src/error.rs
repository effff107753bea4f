use std::fmt;

use smart_core::Error;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Bad parameter values are config errors, anything about the files is a
/// data error, breakdowns inside the numerics are numerical failures.
pub fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        return EXIT_NUMERICAL;
    }
    match e {
        Error::InvalidArgument(_) | Error::Infeasible(_) => EXIT_CONFIG,
        Error::Solver { source, .. } => exit_code(source),
        _ => EXIT_DATA,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self { code: exit_code(&e), message: e.to_string() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes() {
        assert_eq!(exit_code(&Error::Numerical("nan".into())), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::InvalidArgument("r".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Shape("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::Format { path: "a".into(), message: "b".into() }), EXIT_DATA);
        let wrapped = Error::Solver { iteration: 2, stage: "P1", source: Box::new(Error::Numerical("x".into())) };
        assert_eq!(CliError::from(wrapped).code, EXIT_NUMERICAL);
    }
}
