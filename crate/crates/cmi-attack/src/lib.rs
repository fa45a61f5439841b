//! Collaborative multimodal interaction attack on dual-encoder image-text
//! models.
//!
//! The attack runs in two cooperating phases. An interaction phase rewrites
//! captions under an embedding-guided word substitution search while
//! accumulating momentum from per-pair image gradients; the accumulated
//! momentum then seeds an iterative sign-step image attack constrained to an
//! L-infinity ball. A retrieval harness measures the damage as recall misses
//! and attack success rates over an image-text corpus.
//!
//! The crate ships a deterministic toy dual encoder (random projections over
//! pixels and word vectors) so every layer, from gradient kernels up to the
//! ablation reports, can be exercised end to end without model weights.

pub mod attack_math;
pub mod backend;
pub mod cli_config;
pub mod cmi_engine;
pub mod embedding_guidance;
pub mod error;
pub mod eval_retrieval;

pub use error::{CmiError, Result};
