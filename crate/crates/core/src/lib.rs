// Validation uses `!(x > 0.0)`-style tests on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustering;
pub mod config;
pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod features;
pub mod pipeline;
pub mod regression;
pub mod trajectory;

pub use error::{Error, Result};
