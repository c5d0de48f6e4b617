//! Overgenerate-and-rank distractor generation for math multiple-choice
//! questions.
//!
//! The crate is organized around the flow of an experiment:
//!
//! - [`mcq`]: question data model, text normalization, dataset I/O.
//! - [`prompt`]: prompt templates and completion parsing.
//! - [`backend`]: completion/scoring backends (HTTP, scripted mock, cache).
//! - [`pipeline`]: overgeneration procedures and Top-k / Rand-k / Only-k selection.
//! - [`preference`]: preference pairs, ranking accuracy, DPO loss, training export.
//! - [`metrics`]: alignment metrics, rank correlation, agreement, t-test.
//! - [`humaneval`]: teacher ranking/rating task files and their analysis.

pub mod backend;
pub mod error;
pub mod humaneval;
pub mod mcq;
pub mod metrics;
pub mod pipeline;
pub mod preference;
pub mod prompt;
pub mod seed;

pub use error::{Error, ErrorCategory, Result};
pub use mcq::{normalize_text, texts_equal, Distractor, Mcq};
