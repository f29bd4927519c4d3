use std::fmt;
use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Two shapes disagree along a named dimension.
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },
    /// Channel split requires an even channel count.
    OddChannels {
        channels: usize,
    },
    /// Reconstruction asked for replayed batch statistics that were never captured.
    MissingReplayStats {
        block: &'static str,
    },
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    InvalidSpec(String),
    Config(String),
    /// A CIFAR-10 style record ended early.
    Truncated {
        offset: u64,
        needed: usize,
        available: usize,
    },
    Checkpoint(String),
    DoubleFree {
        id: u64,
    },
    NonFiniteLoss {
        step: u64,
    },
    Io(io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, dim: &'static str, expected: usize, actual: usize) -> Self {
        Error::ShapeMismatch { op, dim, expected, actual }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, dim, expected, actual } => {
                write!(f, "{op}: shape mismatch in {dim}: expected {expected}, got {actual}")
            }
            Error::OddChannels { channels } => {
                write!(f, "cannot split {channels} channels into two equal halves")
            }
            Error::MissingReplayStats { block } => {
                write!(f, "{block}: batch statistics for replay are not available; run forward first")
            }
            Error::LabelOutOfRange { index, label, classes } => write!(f, "label {label} at index {index} is outside [0, {classes})"),
            Error::InvalidSpec(msg) => write!(f, "invalid architecture: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Truncated { offset, needed, available } => write!(
                f,
                "truncated record at byte offset {offset}: needed {needed} bytes, {available} available"
            ),
            Error::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
            Error::DoubleFree { id } => write!(f, "memory meter: allocation {id} freed twice or never allocated"),
            Error::NonFiniteLoss { step } => write!(f, "non-finite loss at step {step}"),
            Error::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}
