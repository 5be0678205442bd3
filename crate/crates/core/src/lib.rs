//! Residual-stream steering, self-logits augmentation and logit-lens token
//! ranking on a desk-scale decoder-only transformer.

pub mod analysis;
pub mod archive;
pub mod decoding;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod sla;
pub mod steering;
pub mod synthetic;

pub use error::{Error, Result};
