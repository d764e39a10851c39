//! Conditional variable selection for tabular test-case data.
//!
//! Given a set of preselected variables that an expert already trusts, the
//! engine trains a feature-mask network over the remaining candidates and
//! reports which of them matter most for predicting the target.

pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod selector;
pub mod service;
pub mod trainer;

pub use error::{Error, Result};
