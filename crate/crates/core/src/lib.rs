//! Structural position representations for self-attention.
//!
//! Tokens are positioned both by surface order (sequential positions) and by
//! their place in a dependency tree (structural positions). Both kinds come in
//! an absolute flavour, fed through fixed sinusoids, and a relative flavour,
//! fed through learnable relation-aware key/value embeddings.

pub mod deptree;
pub mod harness;
pub mod nn;
pub mod posenc;
pub mod selftest;

pub use deptree::{parse_conllu, DepTree, SubwordAlignment, TreeError};
pub use harness::{HarnessError, RunReport, Task, TaskSample};
pub use nn::{AblationRow, Encoder, EncoderConfig, NnError, PositionFlags};
pub use posenc::{
    AnnotationRecord, FusionMode, PositionAnnotation, PositionConfig, PositionError, Rule1,
};
