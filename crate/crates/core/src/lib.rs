//! Bounded-memory streaming retrieval.
//!
//! Documents arrive as a stream of chunks and are scored against a retrieval
//! profile; a fixed-capacity heavy-hitter index keeps the most similar ones.
//! The retained vectors are clustered with k-means, and queries probe only the
//! clusters whose centroids are closest.

pub mod cli;
pub mod cluster;
pub mod config;
pub mod corpus;
pub mod embed;
pub mod eval;
pub mod hhindex;
pub mod retrieve;
