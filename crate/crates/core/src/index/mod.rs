//! Top-k cosine similarity indexes over an [`EmbeddingStore`].
//!
//! Four interchangeable structures share one query contract: results are
//! sorted by score descending with ties broken by ascending item id, and
//! scores are inner products of unit vectors (cosine). `Flat` is exhaustive
//! and serves as the correctness oracle for the approximate kinds.

mod forest;
mod hnsw;
mod ivf;
mod topk;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use forest::{ForestIndex, DEFAULT_LEAF_SIZE};
pub use hnsw::HnswIndex;
pub use ivf::{kmeans, IvfIndex, KMEANS_MAX_ITERS};

use crate::catalog::EmbeddingStore;
use crate::codec::{DecodeError, Reader, Writer};
use crate::vecmath::{dot, normalized};
use topk::TopK;

pub const INDEX_MAGIC: &[u8; 4] = b"KKIX";
pub const INDEX_VERSION: u32 = 2;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot build an index over an empty store")]
    EmptyStore,
    #[error("invalid index config: {0}")]
    ConfigInvalid(String),
    #[error("query has {found} dimensions, index has {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("k = {k} out of range 1..={count}")]
    KOutOfRange { k: usize, count: usize },
    #[error("query vector is zero or non-finite")]
    DegenerateQuery,
    #[error("index and oracle were built over different stores")]
    StoreMismatch,
    #[error("persisted index was built over a different store")]
    HashMismatch,
    #[error("persisted index has version {found}, expected {expected}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("persisted index is truncated")]
    TruncatedInput,
    #[error("persisted index is malformed: {0}")]
    Malformed(String),
}

impl From<DecodeError> for IndexError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Truncated { .. } => IndexError::TruncatedInput,
            DecodeError::Version { expected, found } => IndexError::VersionMismatch { expected, found },
            other => IndexError::Malformed(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum IndexKind {
    Flat,
    Ivf,
    Hnsw,
    Forest,
}

impl IndexKind {
    pub const ALL: [IndexKind; 4] = [IndexKind::Flat, IndexKind::Ivf, IndexKind::Hnsw, IndexKind::Forest];

    fn tag(self) -> u8 {
        match self {
            IndexKind::Flat => 0,
            IndexKind::Ivf => 1,
            IndexKind::Hnsw => 2,
            IndexKind::Forest => 3,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            IndexKind::Flat => "FLAT",
            IndexKind::Ivf => "IVF",
            IndexKind::Hnsw => "HNSW",
            IndexKind::Forest => "FOREST",
        }
    }
}

impl fmt::Display for IndexKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IndexKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown index kind {s:?} (expected FLAT, IVF, HNSW or FOREST)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    pub kind: IndexKind,
    pub ivf_nlist: usize,
    pub ivf_nprobe: usize,
    pub hnsw_m: usize,
    pub hnsw_ef_construction: usize,
    pub hnsw_ef_search: usize,
    pub forest_n_trees: usize,
    pub forest_search_k: usize,
    pub forest_leaf_size: usize,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            kind: IndexKind::Hnsw,
            ivf_nlist: 256,
            ivf_nprobe: 16,
            hnsw_m: 16,
            hnsw_ef_construction: 128,
            hnsw_ef_search: 160,
            forest_n_trees: 16,
            forest_search_k: 4096,
            forest_leaf_size: DEFAULT_LEAF_SIZE,
            seed: 0,
        }
    }
}

impl IndexConfig {
    pub fn with_kind(kind: IndexKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self, count: usize) -> Result<(), IndexError> {
        let bad = |msg: String| Err(IndexError::ConfigInvalid(msg));
        match self.kind {
            IndexKind::Flat => Ok(()),
            IndexKind::Ivf => {
                if self.ivf_nlist == 0 || self.ivf_nlist > count {
                    bad(format!("ivf_nlist {} must be in 1..={count}", self.ivf_nlist))
                } else if self.ivf_nprobe == 0 || self.ivf_nprobe > self.ivf_nlist {
                    bad(format!("ivf_nprobe {} must be in 1..={}", self.ivf_nprobe, self.ivf_nlist))
                } else {
                    Ok(())
                }
            }
            IndexKind::Hnsw => {
                if self.hnsw_m < 2 {
                    bad(format!("hnsw_m {} must be at least 2", self.hnsw_m))
                } else if self.hnsw_ef_construction == 0 || self.hnsw_ef_search == 0 {
                    bad("hnsw ef parameters must be positive".into())
                } else {
                    Ok(())
                }
            }
            IndexKind::Forest => {
                if self.forest_n_trees == 0 {
                    bad("forest_n_trees must be at least 1".into())
                } else if self.forest_search_k == 0 || self.forest_leaf_size == 0 {
                    bad("forest_search_k and forest_leaf_size must be positive".into())
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Per-query overrides of the search-time knobs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SearchParams {
    pub ivf_nprobe: Option<usize>,
    pub hnsw_ef_search: Option<usize>,
    pub forest_search_k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Neighbor {
    pub id: String,
    pub row: usize,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    pub hits: Vec<Neighbor>,
    pub elapsed_us: f64,
}

impl SearchResult {
    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Structure {
    Flat,
    Ivf(IvfIndex),
    Hnsw(HnswIndex),
    Forest(ForestIndex),
}

/// An immutable, queryable index. Queries take `&self` and allocate their
/// own scratch, so one index can serve any number of threads.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    config: IndexConfig,
    store: Arc<EmbeddingStore>,
    structure: Structure,
}

impl PartialEq for VectorIndex {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.structure == other.structure && *self.store == *other.store
    }
}

/// Exact top-k over every row.
fn flat_search(store: &EmbeddingStore, q: &[f32], k: usize) -> Vec<(u32, f32)> {
    let mut top = TopK::new(k, store);
    for r in 0..store.len() {
        top.push(r as u32, dot(q, store.row(r)));
    }
    top.into_sorted()
}

impl VectorIndex {
    pub fn build(store: Arc<EmbeddingStore>, config: IndexConfig) -> Result<Self, IndexError> {
        if store.is_empty() {
            return Err(IndexError::EmptyStore);
        }
        config.validate(store.len())?;
        let structure = match config.kind {
            IndexKind::Flat => Structure::Flat,
            IndexKind::Ivf => Structure::Ivf(IvfIndex::build(&store, config.ivf_nlist, config.seed)),
            IndexKind::Hnsw => Structure::Hnsw(HnswIndex::build(
                &store,
                config.hnsw_m,
                config.hnsw_ef_construction,
                config.seed,
            )),
            IndexKind::Forest => Structure::Forest(ForestIndex::build(
                &store,
                config.forest_n_trees,
                config.forest_leaf_size,
                config.seed,
            )),
        };
        Ok(Self {
            config,
            store,
            structure,
        })
    }

    pub fn flat(store: Arc<EmbeddingStore>) -> Result<Self, IndexError> {
        Self::build(store, IndexConfig::with_kind(IndexKind::Flat))
    }

    pub fn kind(&self) -> IndexKind {
        self.config.kind
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<EmbeddingStore> {
        &self.store
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.store.dim()
    }

    pub fn query(&self, q: &[f32], k: usize) -> Result<SearchResult, IndexError> {
        self.query_with(q, k, SearchParams::default())
    }

    pub fn query_with(&self, q: &[f32], k: usize, params: SearchParams) -> Result<SearchResult, IndexError> {
        let start = Instant::now();
        let raw = self.search_rows(q, k, params)?;
        let elapsed_us = start.elapsed().as_secs_f64() * 1e6;
        let hits = raw
            .into_iter()
            .map(|(row, score)| Neighbor {
                id: self.store.id(row as usize).to_owned(),
                row: row as usize,
                score,
            })
            .collect();
        Ok(SearchResult { hits, elapsed_us })
    }

    /// Query returning `(row, score)` pairs without id materialization or timing.
    pub fn search_rows(&self, q: &[f32], k: usize, params: SearchParams) -> Result<Vec<(u32, f32)>, IndexError> {
        let q = self.prepare_query(q, k)?;
        let store = &*self.store;
        Ok(match &self.structure {
            Structure::Flat => flat_search(store, &q, k),
            Structure::Ivf(ivf) => ivf.search(store, &q, k, params.ivf_nprobe.unwrap_or(self.config.ivf_nprobe)),
            Structure::Hnsw(h) => h.search(store, &q, k, params.hnsw_ef_search.unwrap_or(self.config.hnsw_ef_search)),
            Structure::Forest(f) => f.search(store, &q, k, params.forest_search_k.unwrap_or(self.config.forest_search_k)),
        })
    }

    fn prepare_query(&self, q: &[f32], k: usize) -> Result<Vec<f32>, IndexError> {
        if q.len() != self.dim() {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim(),
                found: q.len(),
            });
        }
        if k == 0 || k > self.len() {
            return Err(IndexError::KOutOfRange { k, count: self.len() });
        }
        normalized(q).ok_or(IndexError::DegenerateQuery)
    }

    /// Bytes held by vectors, the id table and the kind-specific structure.
    pub fn memory_footprint(&self) -> MemoryFootprint {
        let vectors = self.store.len() * self.store.dim() * 4;
        let ids = self
            .store
            .ids()
            .iter()
            .map(|s| s.len() + std::mem::size_of::<String>())
            .sum();
        let structure = match &self.structure {
            Structure::Flat => 0,
            Structure::Ivf(ivf) => ivf.structure_bytes(),
            Structure::Hnsw(h) => h.structure_bytes(),
            Structure::Forest(f) => f.structure_bytes(),
        };
        MemoryFootprint { vectors, ids, structure }
    }

    pub fn save(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(INDEX_MAGIC);
        w.u32(INDEX_VERSION);
        w.u8(self.config.kind.tag());
        w.bytes(&self.store.content_hash());
        let c = &self.config;
        for v in [
            c.ivf_nlist,
            c.ivf_nprobe,
            c.hnsw_m,
            c.hnsw_ef_construction,
            c.hnsw_ef_search,
            c.forest_n_trees,
            c.forest_search_k,
            c.forest_leaf_size,
        ] {
            w.u64(v as u64);
        }
        w.u64(c.seed);
        match &self.structure {
            Structure::Flat => {}
            Structure::Ivf(ivf) => ivf.encode(&mut w),
            Structure::Hnsw(h) => h.encode(&mut w),
            Structure::Forest(f) => f.encode(&mut w),
        }
        w.into_bytes()
    }

    /// Restores an index saved by [`VectorIndex::save`]. `store` must have the
    /// same content hash as the store the index was built over.
    pub fn load(bytes: &[u8], store: Arc<EmbeddingStore>) -> Result<Self, IndexError> {
        let mut r = Reader::new(bytes);
        r.magic(INDEX_MAGIC)?;
        r.version(INDEX_VERSION)?;
        let kind = IndexKind::from_tag(r.u8()?).ok_or_else(|| IndexError::Malformed("unknown kind tag".into()))?;
        let hash = r.array::<32>()?;
        let mut fields = [0usize; 8];
        for f in fields.iter_mut() {
            *f = r.u64()? as usize;
        }
        let seed = r.u64()?;
        if hash != store.content_hash() {
            return Err(IndexError::HashMismatch);
        }
        let config = IndexConfig {
            kind,
            ivf_nlist: fields[0],
            ivf_nprobe: fields[1],
            hnsw_m: fields[2],
            hnsw_ef_construction: fields[3],
            hnsw_ef_search: fields[4],
            forest_n_trees: fields[5],
            forest_search_k: fields[6],
            forest_leaf_size: fields[7],
            seed,
        };
        config.validate(store.len())?;
        let structure = match kind {
            IndexKind::Flat => Structure::Flat,
            IndexKind::Ivf => Structure::Ivf(IvfIndex::decode(&mut r, &store)?),
            IndexKind::Hnsw => Structure::Hnsw(HnswIndex::decode(&mut r, &store)?),
            IndexKind::Forest => Structure::Forest(ForestIndex::decode(&mut r, &store)?),
        };
        r.finish()?;
        Ok(Self {
            config,
            store,
            structure,
        })
    }

    pub fn as_hnsw(&self) -> Option<&HnswIndex> {
        match &self.structure {
            Structure::Hnsw(h) => Some(h),
            _ => None,
        }
    }

    pub fn as_ivf(&self) -> Option<&IvfIndex> {
        match &self.structure {
            Structure::Ivf(i) => Some(i),
            _ => None,
        }
    }

    pub fn as_forest(&self) -> Option<&ForestIndex> {
        match &self.structure {
            Structure::Forest(f) => Some(f),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryFootprint {
    pub vectors: usize,
    pub ids: usize,
    pub structure: usize,
}

impl MemoryFootprint {
    pub fn total(&self) -> usize {
        self.vectors + self.ids + self.structure
    }
}

/// Mean over queries of |approx top-k ∩ exact top-k| / k.
pub fn recall_against_oracle(
    index: &VectorIndex,
    oracle: &VectorIndex,
    queries: &[Vec<f32>],
    k: usize,
) -> Result<f64, IndexError> {
    recall_with(index, oracle, queries, k, SearchParams::default())
}

pub fn recall_with(
    index: &VectorIndex,
    oracle: &VectorIndex,
    queries: &[Vec<f32>],
    k: usize,
    params: SearchParams,
) -> Result<f64, IndexError> {
    if oracle.kind() != IndexKind::Flat {
        return Err(IndexError::ConfigInvalid("oracle must be a FLAT index".into()));
    }
    if !Arc::ptr_eq(index.store(), oracle.store()) && index.store().content_hash() != oracle.store().content_hash() {
        return Err(IndexError::StoreMismatch);
    }
    if queries.is_empty() {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for q in queries {
        let approx = index.search_rows(q, k, params)?;
        let exact = oracle.search_rows(q, k, SearchParams::default())?;
        total += overlap(&approx, &exact) as f64 / k as f64;
    }
    Ok(total / queries.len() as f64)
}

fn overlap(a: &[(u32, f32)], b: &[(u32, f32)]) -> usize {
    let mut rows: Vec<u32> = b.iter().map(|x| x.0).collect();
    rows.sort_unstable();
    a.iter().filter(|x| rows.binary_search(&x.0).is_ok()).count()
}
