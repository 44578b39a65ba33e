use thiserror::Error;

/// Errors raised by graph construction, simulation, estimation and planning.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("structural error: {0}")]
    Structure(String),

    #[error("node {node} has no layer assigned")]
    MissingLayer { node: usize },

    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),

    #[error("self edge on node {0}")]
    SelfEdge(usize),

    #[error("edge ({0}, {1}) is not in the graph")]
    NotAnEdge(usize, usize),

    #[error("bitmap length {got} does not match node count {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("target backward-edge density {target} unachievable; max achievable is {max_achievable}")]
    BetaUnachievable { target: f64, max_achievable: f64 },

    #[error("action {0} is not violated in the current state")]
    ActionNotViolated(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("state space too large: {nodes} nodes exceeds limit {limit}")]
    TooLarge { nodes: usize, limit: usize },

    #[error("construction check failed: {0}")]
    Construction(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
