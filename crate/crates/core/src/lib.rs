//! Multi-listwise preference optimization for prefix-conditioned
//! autoregressive sequence policies.
//!
//! The crate covers the whole loop: a seeded synthetic protein-like testbed,
//! stability and functionality scoring, CDF-weighted quality scores,
//! dominance-based preference pairs, a small causal transformer policy with
//! per-attribute prefixes, SFT/DPO/MLPO training and diversity evaluation.

pub mod config;
pub mod error;
pub mod evalkit;
pub mod policy;
pub mod prefdata;
pub mod records;
pub mod pipeline;
pub mod ranking;
pub mod scoring;
pub mod seqcore;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
