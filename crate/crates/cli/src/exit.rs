use std::fmt;

use pkpd_core::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// A failure reported as one line on stderr with a fixed exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, msg: msg.into() }
    }

    pub fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        Self {
            code: EXIT_IO,
            msg: format!("{}: {e}", path.display()),
        }
    }

    fn kind(&self) -> &'static str {
        match self.code {
            EXIT_CONFIG => "config",
            EXIT_DIVERGENCE => "divergence",
            _ => "io",
        }
    }

    pub fn exit(&self) -> ! {
        let msg = self.msg.replace('\n', " ");
        eprintln!("error[{}]: {msg}", self.kind());
        std::process::exit(self.code)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Divergence { .. } => EXIT_DIVERGENCE,
            Error::Io(_) | Error::Parse { .. } => EXIT_IO,
            _ => EXIT_CONFIG,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::config(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_exit_codes() {
        let div = Error::Divergence { epoch: 3, detail: "loss became NaN".into() };
        assert_eq!(CliError::from(div).code, EXIT_DIVERGENCE);
        let io = Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "gone"));
        assert_eq!(CliError::from(io).code, EXIT_IO);
        assert_eq!(CliError::from(Error::Parse { line: 2, msg: "bad".into() }).code, EXIT_IO);
        assert_eq!(CliError::from(Error::Config("bad".into())).code, EXIT_CONFIG);
    }
}
