use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, found {found:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("level {level} out of range 1..={levels}")]
    LevelOutOfRange { level: usize, levels: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("loss diverged at step {step}")]
    Diverged { step: u64 },
    #[error("cannot draw {requested} distinct coordinates from a support of {support}")]
    SampleTooLarge { requested: usize, support: usize },
    #[error("end of stream after {frames} frames")]
    EndOfStream { frames: u64 },
    #[error("stream source: {0}")]
    Source(String),
    #[error("template memory is empty")]
    EmptyMemory,
    #[error("empty evaluation segment")]
    EmptySegment,
    #[error("supervision point ({y}, {x}) at frame {frame}: {reason}")]
    BadSupervision {
        frame: u64,
        y: usize,
        x: usize,
        reason: &'static str,
    },
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
