use thiserror::Error;

/// Errors raised by model construction, the solvers and the samplers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("partition level {level}: compartment {compartment} spans {cells} cell(s), at least 2 required")]
    Resolution {
        level: usize,
        compartment: usize,
        cells: usize,
    },

    #[error("invalid partition ladder: {0}")]
    Ladder(String),

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("kinetics error: rate q[{from}->{to}]({argument}) = {value}")]
    Rate {
        from: usize,
        to: usize,
        argument: f64,
        value: f64,
    },

    #[error("invalid kinetics: {0}")]
    Kinetics(String),

    #[error("configuration invariant violated: {0}")]
    Configuration(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("scheme error at t = {time}: {detail}")]
    Scheme { time: f64, detail: String },

    #[error("thinning bound violated: total rate {rate} exceeds bound {bound}")]
    ThinningBound { rate: f64, bound: f64 },

    #[error("covariance not positive semidefinite at node {node}: eigenvalue {eigenvalue}")]
    NotPositive { node: usize, eigenvalue: f64 },

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("at simulation time {time}: {source}")]
    AtTime {
        time: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("replicate {replicate} (seed {seed}, stream {stream}) failed: {source}")]
    Replicate {
        replicate: usize,
        seed: u64,
        stream: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_time(self, time: f64) -> Self {
        match self {
            e @ Error::AtTime { .. } => e,
            e => Error::AtTime {
                time,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
