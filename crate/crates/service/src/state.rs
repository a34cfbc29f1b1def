//! Immutable engine state shared by every request.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use closet_core::catalog::{decode_embeddings, load_catalog, CatalogError};
use closet_core::combiner::{CombinerError, CombinerParams};
use closet_core::index::IndexError;
use closet_core::transformer::{TransformerConfig, TransformerError, TransformerParams};
use closet_core::{Catalog, VectorIndex};
use thiserror::Error;

use crate::config::ServiceConfig;
use crate::tryon::{ImageSource, PersonImages};

#[derive(Debug, Error)]
pub enum StartupError {
    #[error("config: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("catalog: {0}")]
    Catalog(#[from] CatalogError),
    #[error("index: {0}")]
    Index(#[from] IndexError),
    #[error("combiner {path}: {source}")]
    Combiner { path: PathBuf, source: CombinerError },
    #[error("transformer {path}: {source}")]
    Transformer { path: PathBuf, source: TransformerError },
    #[error("text embeddings {path}: {reason}")]
    TextEmbeddings { path: PathBuf, reason: String },
    #[error("{what} has dimension {found}, catalog has {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("index cache {path}: {source}")]
    IndexCache { path: PathBuf, source: std::io::Error },
    #[error("person image {path}: {reason}")]
    Person { path: PathBuf, reason: String },
}

pub struct AppState {
    pub catalog: Catalog,
    pub index: VectorIndex,
    pub combiner: CombinerParams,
    pub transformer: TransformerParams,
    /// Feedback-phrase fixtures, keyed by phrase id.
    pub texts: BTreeMap<String, Vec<f32>>,
    pub images: ImageSource,
    pub persons: PersonImages,
    pub page_size: usize,
    pub alternates: usize,
    pub seed: u64,
}

impl AppState {
    /// Loads and validates everything named by `cfg`; any failure aborts
    /// startup.
    pub fn load(cfg: &ServiceConfig) -> Result<Arc<Self>, StartupError> {
        cfg.validate()?;
        let catalog_path = cfg.catalog.as_deref().expect("validated");
        let embeddings_path = cfg.embeddings.as_deref().expect("validated");
        let catalog = load_catalog(catalog_path, embeddings_path)?;
        let dim = catalog.dim();
        tracing::info!(items = catalog.len(), dim, "catalog loaded");

        let index = load_or_build_index(&catalog, cfg)?;

        let combiner = match &cfg.combiner {
            Some(p) => CombinerParams::load(p).map_err(|source| StartupError::Combiner { path: p.clone(), source })?,
            None => {
                tracing::warn!("no combiner configured; feedback search uses the identity combiner");
                CombinerParams::identity(dim, 4 * dim)
            }
        };
        if combiner.dim() != dim {
            return Err(StartupError::Dimension {
                what: "combiner",
                expected: dim,
                found: combiner.dim(),
            });
        }
        let transformer = match &cfg.transformer {
            Some(p) => TransformerParams::load(p).map_err(|source| StartupError::Transformer { path: p.clone(), source })?,
            None => {
                tracing::warn!("no transformer configured; recommendations come from an untrained model");
                TransformerParams::init(TransformerConfig::desk(dim), cfg.seed).map_err(|source| StartupError::Transformer {
                    path: PathBuf::from("<untrained>"),
                    source,
                })?
            }
        };
        if transformer.config().dim != dim {
            return Err(StartupError::Dimension {
                what: "transformer",
                expected: dim,
                found: transformer.config().dim,
            });
        }
        let texts = match &cfg.text_embeddings {
            Some(p) => load_texts(p, dim)?,
            None => BTreeMap::new(),
        };
        let persons = PersonImages::load(&cfg.persons)?;
        Ok(Arc::new(Self {
            catalog,
            index,
            combiner,
            transformer,
            texts,
            images: ImageSource::new(cfg.image_root.clone()),
            persons,
            page_size: cfg.page_size,
            alternates: cfg.alternates,
            seed: cfg.seed,
        }))
    }
}

fn load_or_build_index(catalog: &Catalog, cfg: &ServiceConfig) -> Result<VectorIndex, StartupError> {
    let store = Arc::clone(catalog.store());
    if let Some(path) = &cfg.index_cache {
        if let Ok(bytes) = std::fs::read(path) {
            match VectorIndex::load(&bytes, Arc::clone(&store)) {
                Ok(index) if *index.config() == cfg.index => {
                    tracing::info!(path = %path.display(), kind = %index.kind(), "index loaded from cache");
                    return Ok(index);
                }
                Ok(_) => tracing::info!(path = %path.display(), "cached index has a different config; rebuilding"),
                Err(e) => tracing::warn!(path = %path.display(), error = %e, "cached index unusable; rebuilding"),
            }
        }
    }
    let started = std::time::Instant::now();
    let index = VectorIndex::build(store, cfg.index.clone())?;
    tracing::info!(kind = %index.kind(), secs = started.elapsed().as_secs_f64(), "index built");
    if let Some(path) = &cfg.index_cache {
        write_atomic(path, &index.save()).map_err(|source| StartupError::IndexCache { path: path.clone(), source })?;
    }
    Ok(index)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

fn load_texts(path: &Path, dim: usize) -> Result<BTreeMap<String, Vec<f32>>, StartupError> {
    let err = |reason: String| StartupError::TextEmbeddings {
        path: path.to_owned(),
        reason,
    };
    let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
    let (found, rows) = decode_embeddings(&bytes).map_err(|e| err(e.to_string()))?;
    if found != dim {
        return Err(StartupError::Dimension {
            what: "text embeddings",
            expected: dim,
            found,
        });
    }
    let mut out = BTreeMap::new();
    for (key, v) in rows {
        if out.insert(key.clone(), v).is_some() {
            return Err(err(format!("duplicate key {key:?}")));
        }
    }
    Ok(out)
}
