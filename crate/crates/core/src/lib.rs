//! Fine-grained PM2.5/PM10 forecasting from sparse mobile-sensor readings.
//!
//! Readings are bucketed into 1 km² × 30-minute cells and gaps are filled by a
//! weighted-feature IDW imputer. Recurrent and graph-recurrent forecasters
//! train on a small reverse-mode autodiff engine. See the README for the CLI.

// `!(x > 0.0)` style guards are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod binio;
pub mod cli;
pub mod domain;
pub mod error;
pub mod eval;
pub mod graph;
pub mod impute;
pub mod ingest;
pub mod neuralnet;
pub mod models;
pub mod represent;
pub mod synth;

pub use error::{Error, Result};
