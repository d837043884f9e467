//! Visual token compression toolkit.
//!
//! The pipeline has three stages:
//!
//! 1. [`grouping`] partitions the visual tokens of a [`Sample`] by their
//!    nearest vocabulary anchor, optionally keeping only the largest groups.
//! 2. [`evolution`] searches the one-token-per-group mask space for the
//!    mask minimizing a black-box [`scorer::Scorer`] loss and emits a
//!    [`LabelRecord`].
//! 3. [`compressor`] trains a single-layer bidirectional transformer with a
//!    token classifier on those labels ([`losses`] holds the objectives), and
//!    keeps the top-r tokens at inference.
//!
//! See the crate's `examples/` directory for one runnable program per stage.

pub mod bench;
pub mod commands;
pub mod compressor;
pub mod container;
pub mod error;
pub mod eval;
pub mod evolution;
pub mod grouping;
pub mod hash;
pub mod label;
pub mod losses;
pub mod mask;
pub mod render;
pub mod sample;
pub mod scorer;
pub mod synth;

pub use error::{Error, Result, ScoreError};
pub use label::LabelRecord;
pub use mask::{apply_mask, compose_mask, decompose_mask, Group, GroupPartition, Mask};
pub use sample::{validate_sample, AnchorSet, Sample};
