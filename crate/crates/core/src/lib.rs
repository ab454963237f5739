//! PromptVeil: system-prompt obfuscation for causal language models.
//!
//! The toolkit replaces a confidential system prompt with a
//! functionality-preserving but unintelligible surrogate, in either token
//! space (hard prompts, greedy coordinate search) or embedding space (soft
//! prompts, gradient descent), and ships the full evaluation and red-team
//! suite needed to measure how much utility the surrogate preserves and how
//! little it leaks:
//!
//! - [`model`] — gateway trait over causal LMs plus the in-repo backends
//! - [`prompt`] — prompt value types, scenario assembly, SOBF persistence
//! - [`corpus`] — dataset ingestion, splitting, target-output generation
//! - [`objective`] — the per-token CE+KL collision loss with windowing
//! - [`gcg`] — hard-prompt optimization by greedy coordinate gradient
//! - [`soft`] — soft-prompt optimization by windowed Adam
//! - [`metrics`] — output- and prompt-similarity suites with aggregation
//! - [`projection`] — nearest-row inversion of soft prompts to tokens
//! - [`deobfuscation`] — injection, projection, and fluency attacks
//! - [`runner`] — experiment orchestration, manifests, and reports

pub mod corpus;
pub mod deobfuscation;
pub mod error;
pub mod gcg;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod objective;
pub mod projection;
pub mod prompt;
pub mod runner;
pub mod soft;

pub use error::{Error, Result};
