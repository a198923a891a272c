//! Zero-shot classification by regressing paired visual and textual feature
//! vectors into a class-vector space.
//!
//! A network is trained with softmax cross-entropy whose output layer is the
//! (frozen) matrix of seen-class vectors. At test time the softmax is dropped
//! and the semantic-layer activation is matched against class vectors of any
//! class, seen or not, by exact nearest-neighbour search.

pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod linalg;
pub mod network;
pub mod semantic_space;
pub mod trainer;

pub use error::{Error, Result};
