//! duotrack-core: a self-contained engine for persona-conditioned speech
//! prosody. It synthesizes a character dialogue corpus with a rule-based
//! annotation oracle, trains a persona adapter with distillation and
//! contrastive objectives, runs a dual-track acoustic stage (scalar-quantized
//! timbre plus a flow-matching prosody sampler), and evaluates the result
//! with speaker/emotion encoders and cross-modal retrieval.
//!
//! Everything is deterministic given a root seed: randomness flows through
//! named substreams, collections iterate in sorted order, and artifacts are
//! byte-stable.

pub mod adapter;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod num;
pub mod pipeline;
pub mod prosodyflow;
pub mod retrieval;
pub mod rng;
pub mod timbre;

pub use error::{Error, Result};
