//! Inference of competition and mutualism among clusters of online groups
//! from weekly participation time series.
//!
//! The pipeline runs event ingestion ([`ingest`]), user-overlap embedding
//! ([`overlap`]), community clustering ([`cluster`]), the quadratic
//! density-dependence regression ([`density`]), per-cluster VAR(1) fits
//! ([`var`]), bootstrap impulse-response networks ([`irf`]) and forecast
//! scoring ([`forecast`]). [`synth`] generates planted-truth corpora and
//! [`pipeline`] ties the stages together behind a content-hash cache.

pub mod cluster;
pub mod density;
pub mod error;
pub mod forecast;
pub mod ingest;
pub mod irf;
pub mod linalg;
pub mod overlap;
pub mod persist;
pub mod pipeline;
pub mod sparse;
pub mod synth;
pub mod var;

pub use error::{Error, Result};
pub use nalgebra;
