//! Machine-unlearning laboratory for small causal language models.
//!
//! The crate is layered bottom-up: [`numerics`] supplies dense linear algebra,
//! [`model`] a tiny decoder-only transformer with hand-written gradients,
//! [`objectives`] the unlearning losses, [`adapters`] low-rank adapters with
//! Fisher-weighted initialization, [`metrics`] memorization measures and
//! [`harness`] the pretrain, unlearn and evaluate pipeline.

pub mod adapters;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod metrics;
pub mod objectives;

pub use error::{Result, UlabError};
