use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform for a primitive.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A primitive produced NaN or an infinity.
    NonFinite {
        op: &'static str,
    },
    /// `backward` needs a single-element loss.
    NotScalar {
        shape: Vec<usize>,
    },
    /// `backward` was already run on this tape without a new forward pass.
    TapeConsumed,
    InvalidConfig(String),
    /// A mask or index set that must be non-empty was empty.
    Empty(&'static str),
    /// Input data cannot support the requested operation.
    Degenerate(String),
    Singular(String),
    /// Training produced a non-finite loss.
    Diverged {
        epoch: usize,
        total: f64,
        gcn: f64,
        graph: f64,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            Error::NonFinite { op } => write!(f, "{op}: numeric overflow (non-finite result)"),
            Error::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::TapeConsumed => f.write_str("backward already ran on this tape; record a new forward pass first"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Empty(what) => write!(f, "{what} is empty"),
            Error::Degenerate(msg) => write!(f, "degenerate input: {msg}"),
            Error::Singular(msg) => write!(f, "singular system: {msg}"),
            Error::Diverged {
                epoch,
                total,
                gcn,
                graph,
            } => write!(
                f,
                "non-finite loss at epoch {epoch} (total {total}, gcn {gcn}, graph {graph})"
            ),
        }
    }
}

impl core::error::Error for Error {}
