use std::fmt;

/// Fatal errors, one exit code per class.
#[derive(Debug)]
pub enum Failure {
    /// An upstream stage has not run, or ran under another configuration.
    Upstream(String),
    /// Unreadable input, malformed data, or data that cannot support the stage.
    Data(String),
    Config(String),
    Other(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Other(_) => 1,
            Failure::Upstream(_) => 3,
            Failure::Data(_) => 4,
            Failure::Config(_) => 5,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Upstream(m) => write!(f, "{m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<utirisk::Error> for Failure {
    fn from(e: utirisk::Error) -> Self {
        use utirisk::Error as E;
        match e {
            E::Config(_) | E::LikelihoodTable(_) => Failure::Config(e.to_string()),
            E::Io { .. }
            | E::UnreadableStream { .. }
            | E::TooFewRows { .. }
            | E::ArityMismatch { .. }
            | E::SingleClass
            | E::ModelFormat { .. }
            | E::CohortFormat { .. } => Failure::Data(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}
