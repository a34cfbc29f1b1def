//! Fashion retrieval and outfit recommendation over precomputed image embeddings.

pub mod catalog;
pub mod codec;
pub mod combiner;
pub mod demo;
pub mod index;
pub mod optim;
pub mod recommendation;
pub mod retrieval;
pub mod synth;
pub mod transformer;
pub mod vecmath;

pub use catalog::{Catalog, Category, EmbeddingStore, Item};
pub use index::{IndexConfig, IndexKind, SearchResult, VectorIndex};
