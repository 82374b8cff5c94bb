//! puncto-core: a desk-scale point-cloud transformer encoder aligned to
//! frozen image/text teacher embeddings.
//!
//! Everything in this crate is deterministic: fixed-seed RNG streams, f64
//! arithmetic with a fixed evaluation order, and index-based tie-breaking.
//! Run the same config twice and you get byte-identical artifacts.

pub mod autodiff;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod mat;
pub mod paint;
pub mod partseg;
pub mod ply;
pub mod retrieval;
pub mod rng;
pub mod teachercache;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{farthest_point_sample, knn, normalize_unit_sphere, PointCloud};
pub use mat::Mat;
