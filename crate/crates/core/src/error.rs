use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("query ({x}, {y}) outside field bounds [0, {max_x}) x [0, {max_y})")]
    OutOfBounds { x: f64, y: f64, max_x: f64, max_y: f64 },

    #[error("site placement failed for seed {seed}: {reason}")]
    Placement { seed: u64, reason: String },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("pair tx {tx_id} / rx {rx_id}: {source}")]
    Pair {
        tx_id: usize,
        rx_id: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("length mismatch: {0} predictions vs {1} ground-truth values")]
    LengthMismatch(usize, usize),

    #[error("MAPE undefined: ground truth at index {0} is zero")]
    MapeUndefined(usize),

    #[error("duplicate transmitter id {0}")]
    DuplicateId(usize),

    #[error("singular fit: {0}")]
    SingularFit(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { found: u16, expected: u16 },

    #[error("truncated data: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable class of the failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::Pair { source, .. } | Error::Fold { source, .. } => source.code(),
            Error::Divergence { .. } => "divergence",
            Error::BadMagic { .. } | Error::Version { .. } | Error::Truncated { .. } | Error::Checksum { .. } | Error::Malformed(_) => {
                "format"
            }
            Error::Io(_) => "io",
            _ => "runtime",
        }
    }

    /// True for mistakes in the invocation or configuration rather than in
    /// the run itself.
    pub fn is_usage(&self) -> bool {
        matches!(self.code(), "config" | "usage")
    }

    pub(crate) fn in_pair(self, tx_id: usize, rx_id: usize) -> Self {
        Error::Pair {
            tx_id,
            rx_id,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_fold(self, fold: usize) -> Self {
        Error::Fold {
            fold,
            source: Box::new(self),
        }
    }
}
