use thiserror::Error;

pub type Result<T> = std::result::Result<T, SeqmarkError>;

#[derive(Debug, Error)]
pub enum SeqmarkError {
    #[error("sequence lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("state {state} out of range for alphabet size {m}{}", at.map(|(r, c)| format!(" at row {r}, column {c}")).unwrap_or_default())]
    StateOutOfRange {
        state: i64,
        m: u8,
        at: Option<(usize, usize)>,
    },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("pattern index {index} not contained in the shared index set")]
    IndexOutsideShared { index: usize },

    #[error("pattern entry at index {index} records original state {found}, ledger base has {expected}")]
    BaseStateMismatch {
        index: usize,
        expected: u8,
        found: u8,
    },

    #[error("service provider id {0} already present in the ledger")]
    DuplicateSpId(u32),

    #[error("invalid watermark pattern: {0}")]
    InvalidPattern(String),

    #[error("infeasible allocation: {0}")]
    Infeasible(String),

    #[error("instance too large: {0}")]
    InstanceTooLarge(String),

    #[error("cannot place {requested} watermarks, only {placed} watermarkable points found")]
    InsufficientWatermarkablePoints { requested: u64, placed: u64 },

    #[error("ledger contains no sharings")]
    EmptyLedger,

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("corpus records have unequal lengths: {0} vs {1}")]
    RaggedCorpus(usize, usize),

    #[error("contradictory correlation spec: {0}")]
    ContradictorySpec(String),

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse {
        row: usize,
        col: usize,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("trial {trial}: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<SeqmarkError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl SeqmarkError {
    pub fn in_trial(self, trial: usize) -> Self {
        SeqmarkError::Trial {
            trial,
            source: Box::new(self),
        }
    }
}
