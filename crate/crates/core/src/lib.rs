//! Class-incremental multi-organ segmentation on synthetic phantoms.
//!
//! A shared encoder-decoder produces decoder features and a pooled global
//! feature; each class owns an independent hypernetwork that turns
//! `[global feature, class embedding]` into the weights of a small
//! convolutional head. New classes are added by appending heads, and old
//! classes are supervised with pseudo labels produced by the previous model.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod backbone;
pub mod continual;
pub mod distill;
pub mod embeddings;
pub mod error;
pub mod experiment;
pub mod flops;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod plan;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};

/// Stable identifier of a segmentation class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u16);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
