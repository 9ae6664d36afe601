// `!(x > 0.0)` is used on purpose: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cepredictor;
pub mod classifier;
pub mod cli;
pub mod contrastive;
pub mod dataio;
pub mod datamodel;
pub mod error;
pub mod expansion;
pub mod memorybank;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod sessions;
pub mod trajectory;

pub use error::{Error, Result};
