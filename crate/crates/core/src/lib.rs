//! Two-stage audio–visual embedding learning. A teacher network is trained
//! with soft-label alignment and a proxy triplet loss; a sparse directed
//! interaction graph over its class logits is inferred by permutation search;
//! a student stage then adds a graph-weighted distance regularizer.

pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod grasp;
pub mod linalg;
pub mod losses;
pub mod net;
pub mod retrieval;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;
