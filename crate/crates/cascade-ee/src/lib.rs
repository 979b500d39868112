//! Cascade-decoded overlapping event extraction.
//!
//! The pipeline factorizes event extraction into three conditioned stages:
//! detect event types in a sentence, tag trigger spans per detected type,
//! and tag role-specific argument spans per (type, trigger) pair. Because
//! each stage decodes separately per condition, spans that overlap across
//! events or roles are extracted without label conflicts. All stages share
//! a trainable encoder and are optimized jointly.

pub mod argument_extractor;
pub mod autodiff;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod params;
pub mod primitives;
pub mod schema;
pub mod span_decoder;
pub mod synthetic;
pub mod training;
pub mod trigger_extractor;
pub mod type_detector;

pub use error::{Error, Result};
