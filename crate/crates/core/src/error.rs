//! Error types shared across the crate.

use thiserror::Error;

/// Shape or operand problems raised by tensor operations.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ShapeError {
    #[error("{op}: operand shapes {lhs:?} and {rhs:?} do not conform")]
    Mismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// Failures during graph construction or backpropagation.
#[derive(Debug, Error)]
pub enum GraphError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),
    #[error("checkpoint region is not pure: recomputed output differs from recorded output")]
    ImpureRegion,
    #[error("byte id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
}

/// Configuration validation failures; one entry per violated invariant.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid configuration:\n{}", violations.join("\n"))]
pub struct ConfigError {
    pub violations: Vec<String>,
}

impl ConfigError {
    pub fn new(violations: Vec<String>) -> Self {
        Self { violations }
    }
}

/// Data ingestion and sample assembly failures.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("corpus path not found: {0}")]
    CorpusNotFound(String),
    #[error("empty filestream: {0}")]
    EmptyFilestream(String),
    #[error("window [{offset}, {offset}+{len}) out of range for corpus of {corpus_len} bytes")]
    WindowOutOfRange { offset: usize, len: usize, corpus_len: usize },
    #[error("image payload of {actual} bytes does not match declared {height}x{width}x3 = {expected}")]
    ImageSizeMismatch { height: usize, width: usize, expected: usize, actual: usize },
    #[error("answer out of range 0-{max}: {answer}")]
    AnswerOutOfRange { answer: u32, max: u32 },
    #[error("unknown answer {0:?} (not in the answer table)")]
    UnknownAnswer(String),
    #[error("unknown question type {0:?}")]
    UnknownQuestionType(String),
    #[error("sample of {required} bytes does not fit in context of {context}")]
    SampleTooLong { required: usize, context: usize },
    #[error("{path}:{line}: malformed record: {msg}")]
    MalformedRecord { path: String, line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Metric computation failures.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("negative mean NLL: {0}")]
    NegativeNll(f64),
    #[error("corpus counts must be positive (L_B={lb}, L_W={lw})")]
    ZeroCounts { lb: u64, lw: u64 },
    #[error("subword perplexity below 1 implies a negative NLL: {0}")]
    PplBelowOne(f64),
    #[error("prediction count {predictions} does not match record count {records}")]
    CountMismatch { predictions: usize, records: usize },
}

/// Training loop failures.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: {loss} (grad_norm of previous step: {prev_grad_norm:?})")]
    NonFinite { step: u64, loss: f64, prev_grad_norm: Option<f64> },
    #[error("learning-rate schedule queried at step {step} beyond total {total}")]
    StepBeyondTotal { step: u64, total: u64 },
    #[error("empty loss mask: no positions contribute to the loss")]
    EmptyMask,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("checkpoint io: {0}")]
    CheckpointIo(String),
    #[error(transparent)]
    Data(#[from] DataError),
}
