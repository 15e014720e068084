#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod identifiability;
pub mod identify;
pub mod metrics;
pub mod parallel;
pub mod seed;

pub use error::{Error, Result};
