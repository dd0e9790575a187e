use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("mean pool over zero rows")]
    EmptyPool,
    #[error("loss mask selects no positions")]
    NoSupervision,
    #[error("non-finite gradient in parameter `{param}` at index {index}")]
    NonFiniteGradient { param: String, index: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("unknown item ids in interactions: {0:?}")]
    UnknownItems(Vec<u64>),
    #[error("dataset is empty after filtering")]
    EmptyDataset,
    #[error("user {0} has no interactions before the anchor")]
    EmptyHistory(u64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("empty title for item {0}")]
    EmptyTitle(u64),
    #[error("prefix {0:?} is not a path in the title trie")]
    InvalidPrefix(Vec<u32>),

    #[error("layout needs {positions} positions but the model allows {max}")]
    LayoutTooLong { positions: usize, max: usize },
    #[error("longest layout (user {user}, item {item}) needs {positions} positions but the model allows {max}")]
    LayoutOffender {
        user: u64,
        item: u64,
        positions: usize,
        max: usize,
    },
    #[error("layout has an empty target")]
    EmptyTarget,
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),
    #[error("dataset too small: {0}")]
    TooSmall(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    /// True for errors caused by user-supplied configuration rather than runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::TomlDe(_) | Error::InvalidArgument(_)
        )
    }
}
