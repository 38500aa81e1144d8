//! Causal-reasoning trace generation, rewriting and evaluation for event
//! causality identification.

pub mod corpus;
pub mod error;
pub mod export;
pub mod gateway;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod rewrite;
pub mod store;
pub mod tracegen;
pub mod util;

pub use error::{Error, Result};
