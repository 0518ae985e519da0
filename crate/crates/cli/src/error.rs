use std::fmt;

/// A command failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const USAGE: u8 = 2;
pub const DATA: u8 = 3;
pub const NUMERIC: u8 = 4;

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: USAGE,
            message: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self {
            code: DATA,
            message: msg.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<dada_core::Error> for Failure {
    fn from(e: dada_core::Error) -> Self {
        use dada_core::Error as E;
        let code = match e {
            E::NonFinite(_) | E::NoCandidates => NUMERIC,
            _ => DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e.to_string())
    }
}
