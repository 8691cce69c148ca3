//! Open-world prompt tuning over a frozen toy vision-language model.
//!
//! The crate covers zero-shot classification with fixed prompts, prompt
//! tuning on base classes, decomposed routing between the two (`dept`),
//! detector ensembles with Otsu thresholds and sub-classifiers (`decoop`),
//! and the metrics used to compare them.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod decoop;
pub mod dept;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod tuning;
pub mod zeroshot;

pub use error::{Error, Result};
