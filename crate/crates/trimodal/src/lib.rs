//! Desk-scale text-to-multimodal product retrieval.
//!
//! Three transformer towers (query, title, image) trained jointly with masked
//! modeling, a query-conditioned fusion module with a matching classifier, and
//! a grouped contrastive objective that keeps related queries out of each
//! other's negative sets. Products are embedded offline, indexed with a
//! hierarchical-clustering ANN structure, and retrieved by query embedding.

pub mod config;
pub mod corpus;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod index;
pub mod loss;
pub mod model;
pub mod serve;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
