//! Demonstration retrieval for in-context learning.
//!
//! Pooled hidden states of a language model (one vector per kept layer) are
//! mapped by per-layer MLPs and mixed with learned layer weights into a
//! retrieval embedding. The embedding is trained with a multi-positive
//! contrastive loss against proxy labels derived from the similarity of
//! problem+query target states, and used to pick demonstrations by exact
//! top-k search.

mod codec;
pub mod container;
pub mod error;
pub mod model;
pub mod nn;
pub mod eval;
pub mod index;
pub mod proxy;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
