//! Product-image retrieval over precomputed embeddings: exact cosine search,
//! multi-scale fusion, crop-group matching, sharded k-reciprocal re-ranking,
//! maximum and voting ensembles, pseudo-label clustering and MAR@K evaluation.
//!
//! The numeric routines are generic over [`Scalar`] (`f32` or `f64`). Files
//! store `f32`; the aliases below name the common instantiations.

pub mod embed_store;
pub mod ensemble;
pub mod error;
pub mod evalbench;
pub mod fsutil;
pub mod harness;
pub mod pseudolabel;
pub mod rerank;
pub mod scalar;
pub mod search;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type EmbeddingSetF32 = embed_store::EmbeddingSet<f32>;
pub type EmbeddingSetF64 = embed_store::EmbeddingSet<f64>;
pub type DistanceMatrixF32 = search::DistanceMatrix<f32>;
pub type DistanceMatrixF64 = search::DistanceMatrix<f64>;
pub type RankingListF32 = search::RankingList<f32>;
pub type RankingListF64 = search::RankingList<f64>;
pub type RerankContextF32 = rerank::RerankContext<f32>;
pub type RerankContextF64 = rerank::RerankContext<f64>;
