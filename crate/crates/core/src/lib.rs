//! Visual-aware KV-cache sparsification and sparse visual contrastive
//! decoding on a seeded toy multimodal decoder.
//!
//! Modules follow the decoding stack bottom-up: [`model`] is the cached
//! transformer, [`selection`] ranks and prunes cached tokens, [`calibration`]
//! recalibrates attention away from sink tokens, [`decoding`] ties them into
//! greedy and beam generation, [`analysis`] inspects attention dumps and
//! [`harness`] drives benchmarks and verification.

pub mod analysis;
pub mod calibration;
pub mod decoding;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod par;
pub mod seed;
pub mod selection;

pub use error::{Error, Result};
