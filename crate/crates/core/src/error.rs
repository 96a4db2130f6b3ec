use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    // graph construction and queries
    #[error("duplicate edge {from} -> {to}")]
    DuplicateEdge { from: usize, to: usize },
    #[error("edge {from} -> {to} enters the source")]
    EdgeIntoSource { from: usize, to: usize },
    #[error("edge {from} -> {to} leaves the sink")]
    EdgeOutOfSink { from: usize, to: usize },
    #[error("state {0} does not lie on any source-to-sink path")]
    DisconnectedState(usize),
    #[error("state {state} out of range (graph has {num_states} states)")]
    StateOutOfRange { state: usize, num_states: usize },
    #[error("source and sink must be distinct")]
    SourceIsSink,
    #[error("invalid hypergrid: {0}")]
    InvalidInitialCell(String),
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error("the sink has no outgoing neighbors")]
    SinkHasNoNeighbors,
    #[error("the source of a Cayley graph is uniform over all permutations and is not enumerated")]
    ImplicitSource,
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    // flows
    #[error("state {0} has zero outgoing mass and no exploration")]
    DeadState(usize),
    #[error("state {0} has zero incoming mass")]
    UnreachableState(usize),
    #[error("state {0} carries reward but has no terminal edge")]
    MissingTerminalEdge(usize),
    #[error("invalid edgeflow: {0}")]
    InvalidFlow(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    // analysis
    #[error("the source has no outgoing flow")]
    NoInitialFlow,
    #[error("absorbing-chain system is singular (a reachable cycle traps the chain)")]
    SingularSystem,
    #[error("edgeflow is not a flow: matching residual {0:e}")]
    NotAFlow(f64),
    #[error("direction is not a 0-flow: {0}")]
    DirectionNotZeroFlow(String),
    #[error("total reward is zero")]
    ZeroReward,

    // losses
    #[error("visited state {0} has nonpositive in- or out-flow")]
    NonpositiveFlowAtVisitedState(usize),
    #[error("trajectory-balance batch contains a truncated path")]
    TruncatedPathInTBBatch,
    #[error("invalid loss parameters: {0}")]
    InvalidLossParams(String),

    // optim / nnflow
    #[error("gradient entry {0} is not finite")]
    NonFiniteGradient(usize),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io: {0}")]
    Io(String),
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
