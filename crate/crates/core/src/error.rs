use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("tape state error: {0}")]
    TapeState(String),

    #[error("fusion error: modality {modality}: {msg}")]
    Fusion { modality: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("config error at line {line}, key `{key}`: {msg}")]
    ConfigLine { line: usize, key: String, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Crc { stored: u32, computed: u32 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parameter `{name}` shape mismatch: expected {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("optimizer consistency error: {0}")]
    Consistency(String),

    #[error("degenerate batch: every pixel is ignored")]
    DegenerateBatch,

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("training aborted at step {step}: {source}")]
    Training {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
