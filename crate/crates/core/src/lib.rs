//! Tract-level crime-count modelling from census, venue and mobility data.

// `!(x > 0.0)` style checks are used deliberately so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod features;
pub mod geo;
pub mod ingest;
pub mod model;
pub mod synth;

pub use error::{Error, Result};
