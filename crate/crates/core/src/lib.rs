//! Evaluation toolkit for personalized text-to-image generation.
//!
//! Metrics score a generated image against the subject's input photo and the
//! prompt: identity preservation ([`identity`]), attribute preservation,
//! object and relation fidelity ([`context`]). The [`prompts`] module builds
//! evaluation prompt sets from template grammars and [`analysis`] measures
//! how well metrics agree with human votes.

pub mod analysis;
pub mod backends;
pub mod cache;
pub mod config;
pub mod context;
pub mod data;
pub mod eval;
pub mod identity;
pub mod penalty;
pub mod prompts;
pub mod report;
pub mod vector;
