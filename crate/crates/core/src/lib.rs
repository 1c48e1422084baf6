//! Vulnerability detection by three reasoning agents (deductive, inductive,
//! abductive) that analyse a code sample independently and then resolve any
//! disagreement through a bounded, parallel debate.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: shared domain types (samples, verdicts, agent outputs).
//! - [`retrieval`]: embedders, cosine similarity and an exact top-k index.
//! - [`knowledge`]: coding-rule and vulnerability/fix knowledge bases.
//! - [`backend`]: text-generation backends with retries, caching and a
//!   scripted backend for tests.
//! - [`agents`]: prompt templates, verdict parsing, independent analysis and
//!   debate deliberation.
//! - [`debate`]: the two-stage detection workflow and batch runner.
//! - [`context`]: caller/callee context selection and serialization.
//! - [`eval`]: paired datasets, metrics, reports and round sweeps.

pub mod agents;
pub mod backend;
pub mod context;
pub mod debate;
pub mod eval;
pub mod jsonl;
pub mod knowledge;
pub mod model;
pub mod retrieval;

pub use model::{
    AgentOutput, CodeSample, FinalReason, FinalVerdict, Label, Paradigm, TransitionState, Verdict,
};

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes.as_ref()))
}
