//! Multivariate time-series forecasting with variate-token Transformers,
//! meta-learned attention and Monte-Carlo dropout.
//!
//! Layers, from the bottom: [`tensor`] (dense values and a reverse-mode
//! tape), [`nn`] (affine, layer norm, dropout, attention), [`model`] (the
//! three forecasters and their parameters), [`meta`] (first-order MAML and
//! plain training), [`data`] (ingest, cleaning, splits, windows, synthetic
//! data) and [`eval`] (metrics, reports, ablation grid).
//!
//! Independent units of work (MC passes, tasks in a meta-batch, evaluation
//! windows, grid runs) go through [`par`], which uses rayon when the
//! `parallel` feature is on and keeps results in index order either way.

pub mod data;
mod error;
pub mod eval;
pub mod meta;
pub mod model;
pub mod nn;
pub mod par;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
