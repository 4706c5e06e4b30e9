//! Semantic-aware local-global vision transformer, built on a self-contained
//! f64 reverse-mode autodiff core.
//!
//! The backbone segments each stage's feature map into semantic regions in a
//! single unsupervised pass, runs masked intra-region self-attention with one
//! aggregation (AGR) token per region, propagates features between regions
//! through the AGR tokens, and stacks four hierarchical stages behind a
//! convolutional patch embedding. Everything is verified against brute-force
//! oracles and finite-difference gradient checks; see the `oracle` module and
//! the crate's test suite.

pub mod backbone;
pub mod block;
pub mod config;
pub mod error;
pub mod image;
pub mod oracle;
pub mod par;
pub mod segmentation;
pub mod tensor;
pub mod train;

pub use error::{Result, SalgError};
