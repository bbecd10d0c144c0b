use std::process::ExitCode;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{message}")]
    Config { message: String, keys: Vec<String> },

    #[error(transparent)]
    Run(#[from] fedsketch::Error),

    #[error("cannot write {path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    message: String,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    keys: &'a [String],
}

impl CliError {
    pub fn config(message: impl Into<String>, keys: Vec<String>) -> Self {
        Self::Config {
            message: message.into(),
            keys,
        }
    }

    /// Core errors that can only come from bad settings count as config
    /// errors too.
    fn is_config(&self) -> bool {
        use fedsketch::Error as E;
        match self {
            Self::Config { .. } => true,
            Self::Run(e) => matches!(
                e,
                E::InvalidConfig(_)
                    | E::InvalidPrivacy(_)
                    | E::InvalidClipBound(_)
                    | E::UnknownProtocol(_)
                    | E::InvalidField(_)
                    | E::InvalidTask(_)
                    | E::InvalidSketchParams(_)
                    | E::TooFewClients(_)
            ),
            Self::Output { .. } => false,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(if self.is_config() { 2 } else { 3 })
    }

    /// One JSON object, for stderr.
    pub fn json_line(&self) -> String {
        let (kind, keys): (&str, &[String]) = match self {
            Self::Config { keys, .. } => ("config", keys),
            Self::Run(fedsketch::Error::Diverged { .. }) => ("diverged", &[]),
            _ if self.is_config() => ("config", &[]),
            _ => ("runtime", &[]),
        };
        serde_json::to_string(&ErrorLine {
            error: kind,
            message: self.to_string(),
            keys,
        })
        .expect("error line serializes")
    }
}
