//! Pretraining objectives for irregular marked event streams.
//!
//! The crate implements a small, fully deterministic stack: an event-stream
//! data model with first-occurrence target extraction under censoring,
//! entropy-based vocabulary selection, per-code quantile discretization,
//! a tape-based autodiff engine, a causal transformer encoder with a
//! factorized prediction head, three pretraining losses (next-token,
//! time-to-event, and the joint time-value objective), linear-probe
//! evaluation, survival-aware metrics, and a synthetic generator with
//! closed-form ground truth.

pub mod autodiff;
pub mod config;
pub mod discretizer;
pub mod error;
pub mod event_stream;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod synth;
pub mod vocab;

pub use error::{Error, Result};
