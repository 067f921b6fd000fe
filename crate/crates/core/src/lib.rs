//! Monotonic multihead attention for streaming sequence transduction.
//!
//! A small Transformer encoder-decoder whose encoder-decoder attention is
//! replaced by monotonic chunkwise multihead attention, together with
//! head-synchronous beam search, boundary-coverage and streamability
//! metrics, and a synthetic monotonic transduction task to train on.

pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod monoattn;
pub mod numerics;
pub mod synthdata;

pub use error::{Error, Result};
