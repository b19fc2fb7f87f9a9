//! Multiscale byte language modeling: an N-stage hierarchical causal
//! decoder over raw bytestreams with pluggable Transformer and selective
//! state-space stage models, chunked activation recomputation, byte-level
//! data pipelines, training, generation, and bits-per-byte evaluation.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod hierarchy;
pub mod metrics;
pub mod params;
pub mod patching;
pub mod rng;
pub mod stage;
pub mod tensor;
pub mod training;

pub use config::{DataConfig, HierarchyConfig, RunConfig, StageConfig, StageKind, TrainConfig, ValidatedConfig};
pub use error::{ConfigError, DataError, GraphError, MetricError, ShapeError, TrainError};
pub use graph::{Graph, Tid};
pub use hierarchy::{ForwardTrace, Mblm};
pub use metrics::{CorpusStats, EvalReport};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
