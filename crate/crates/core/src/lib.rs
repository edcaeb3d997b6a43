//! avmtl: a desk-scale audio-visual multi-task learning testbed.
//!
//! The crate trains and evaluates a single model that jointly performs
//! speech recognition (RNN-T over audio-visual features) and active speaker
//! detection (cross-modal attention over competing face tracks) on
//! synthetic paired data, with a from-scratch tensor/autodiff engine small
//! enough to verify gradient-by-gradient.

pub mod config;
pub mod error;
pub mod features;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
