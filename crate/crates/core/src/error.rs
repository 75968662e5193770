use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("sequence capacity exceeded: max_seq_len is {max}")]
    Capacity { max: usize },

    #[error("precondition violated: {0}")]
    Precondition(&'static str),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("budget {budget} exceeds {len} candidate tokens")]
    Budget { budget: usize, len: usize },

    #[error("degenerate input: {0}")]
    Degenerate(&'static str),

    #[error("exhaustive search over {len} tokens exceeds the limit of {max}")]
    Tractability { len: usize, max: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn ensure_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            what,
            expected,
            actual,
        })
    }
}
