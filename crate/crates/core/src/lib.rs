//! Anchored speech recognition with neural transducers.
//!
//! A transducer ASR model is biased toward the speaker of a clean prefix
//! (the anchor, e.g. a wake word): a context embedding extracted from the
//! anchor is fed into the encoder and used to gate the joiner logits frame by
//! frame. Auxiliary objectives keep the embedding about speaking style rather
//! than lexical content. Everything runs on a synthetic corpus with
//! deterministic overlapped-speech simulation.

// Index loops mirror the lattice and matrix formulas more directly.
#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod numerics;
pub mod params;
pub(crate) mod nn;

pub mod transducer;
pub mod anchoring;
pub mod aux_objectives;
pub mod baselines;
pub mod mixsim;
pub mod model;
pub mod evalreport;
pub mod train;
pub mod config;
pub mod pipeline;

pub use error::{Error, Result};
