//! Neural matrix factorization recommender that fuses user/item ID
//! embeddings with precomputed text, image and profile feature vectors.

pub mod data;
pub mod error;
pub mod numerics;
pub mod model;
pub mod baselines;
pub mod train;
pub mod eval;
pub mod checkpoint;
pub mod experiment;
pub mod cli;

pub use error::{Error, Result};
