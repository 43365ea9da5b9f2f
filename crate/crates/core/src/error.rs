use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate batch: every target position is ignored")]
    DegenerateBatch,

    #[error(transparent)]
    Parse(#[from] crate::mol::ParseError),

    #[error("unsupported atom `{0}`")]
    UnsupportedAtom(String),

    #[error("empty molecular graph")]
    EmptyGraph,

    #[error("cannot tokenize character {0:?}")]
    Tokenize(char),

    #[error("sequence of length {len} exceeds context length {max}")]
    ContextLength { len: usize, max: usize },

    #[error("adapter topology mismatch: {0}")]
    Topology(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Dataset {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("training step failed on example {example}: {source}")]
    Step {
        example: String,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
