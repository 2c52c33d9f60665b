//! Desk-scale contrastive learning for sentence representations.
//!
//! The crate trains a small two-layer encoder on synthetic token
//! sentences using three cooperating objectives:
//!
//! * an identical-twin InfoNCE term, where the positive is a second
//!   dropout pass over the same sentence and extra negative mass comes
//!   from a forgetting-weighted queue of past batch representations,
//! * a fraternal-twin InfoNCE term, where the positive is a surface
//!   remap of the sentence blended into the anchor embedding, and
//! * a twins loss that keeps the gap between identical and fraternal
//!   similarities close to the gap measured on the pooled embeddings
//!   before any encoding.
//!
//! Everything is deterministic: one master seed fans out into named
//! ChaCha8 streams for corpus generation, embedding tables, encoder
//! initialization and dropout masks, so a rerun reproduces every
//! artifact byte for byte. Gradients are computed analytically and are
//! checked against central finite differences in the test suite.
//!
//! The `iftcl` binary exposes `gen`, `train`, `eval`, `mi` and `sweep`
//! verbs; see `docs/config.md` for the configuration keys and
//! `docs/file-formats.md` for the corpus, evaluation, metrics and
//! checkpoint formats.

pub mod augment;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod numeric;
pub mod objective;
pub mod queue;
pub mod streams;
pub mod synth;
pub mod train;
