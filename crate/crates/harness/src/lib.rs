//! Federation harness: topology files, deterministic in-process simulation,
//! HTTP deployment of the federation services, scenarios, and the `dali` CLI.

pub mod cli;
pub mod eventlog;
pub mod federation;
pub mod fuzz;
pub mod http;
pub mod scenario;
pub mod sim;
pub mod topology;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HarnessError {
    #[error("unknown scenario {0:?}")]
    ScriptUnknown(String),
    #[error("invalid topology: {0}")]
    TopologyInvalid(String),
    #[error("event log corrupt: {0}")]
    LogCorrupt(String),
    #[error("replay diverged: {0}")]
    Diverged(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("{0}")]
    Domain(String),
    #[error("http: {0}")]
    Http(String),
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}
