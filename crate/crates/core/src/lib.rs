//! Set-centric evidence selection for retrieval-augmented generation.
//!
//! The crate is organised around the life cycle of an evidence set:
//!
//! - [`retrieval`] builds a lexical index and produces the top-k candidate pool.
//! - [`selection`] expands a question into sub-queries, selects a raw evidence
//!   set from the pool and refines it into a compact one, all through an
//!   [`backend::LlmBackend`].
//! - [`utility`] scores a set by the generator's perplexity on the gold answer
//!   and maps the entropy change to a signed preference score.
//! - [`synthesis`] repeats selection with sampling to build labeled
//!   set-list training instances.
//! - [`loss`] is a reference implementation of the set-list-wise objective
//!   (sequence cross-entropy plus KL over set distributions) on a toy scorer.
//! - [`metrics`] evaluates selections with EM/F1, document counts and novelty.

pub mod backend;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod prompts;
pub mod records;
pub mod retrieval;
pub mod selection;
pub mod synthesis;
pub mod utility;

mod digest;

pub use digest::sha256_hex;

/// Version of this crate.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
