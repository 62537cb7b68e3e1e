//! Knowledge distillation with a learned, sample-wise knowledge-fusion ratio.
//!
//! The fusion ratio per sample is produced by a small network reading the
//! trilateral geometry among the student prediction, teacher prediction, and
//! ground truth, and is trained by bilevel optimization against validation
//! cross-entropy. Fixed, annealed, class-wise, and loss-gap baselines live
//! alongside it, together with the data tooling and analysis reports needed
//! to compare them on small, fully deterministic tasks.

pub mod bilevel;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod numcore;

pub use error::{Error, Result};
