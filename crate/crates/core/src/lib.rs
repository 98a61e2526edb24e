//! Batching of build targets into builds whose predicted memory and
//! executor occupancy stay under configured cutoffs.
//!
//! The pieces, bottom-up:
//!
//! * [`model`]: targets, flags, builds and execution statistics.
//! * [`grouping`]: executor-type inference and lexicographic grouping.
//! * [`batcher`]: the binary-search batching loop and retry policy.
//! * [`features`] and [`regression`]: hashed features and monotone linear models.
//! * [`pipeline`]: labels, datasets, feature selection and model training.
//! * [`estimator`]: trained models wrapped as batcher estimators.
//! * [`service`]: the streaming enqueue front-end and its wire format.
//! * [`simulator`]: a synthetic build cluster with a ground-truth cost oracle.
//! * [`report`]: accuracy and batch-reason tables.
//! * [`config`]: the TOML file read by the command-line tool.

pub mod batcher;
pub mod config;
pub mod error;
pub mod features;
pub mod grouping;
pub mod model;
pub mod estimator;
pub mod pipeline;
pub mod regression;
pub mod report;
pub mod service;
pub mod simulator;

pub use error::{Error, Result};
