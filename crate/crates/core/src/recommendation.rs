//! Outfit recommendation: turns the transformer's predicted embeddings into
//! catalog items under the two presentation settings.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, Category};
use crate::index::VectorIndex;
use crate::retrieval::{ranked_neighbors, RetrievalError};
use crate::transformer::{PlacedItem, TransformerError, TransformerParams};

/// Mix-and-match draws from this many nearest items per category.
pub const MIX_POOL: usize = 1000;

#[derive(Debug, Error)]
pub enum RecommendError {
    #[error("unknown item {0:?}")]
    UnknownItem(String),
    #[error("category {0} has no items")]
    EmptyCategory(Category),
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Setting {
    /// The single nearest item per category.
    #[default]
    ToneSurTone,
    /// A seeded uniform pick among the nearest [`MIX_POOL`] items.
    MixAndMatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub id: String,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendedSlot {
    pub category: Category,
    pub item: ScoredId,
    /// Nearest items of the category other than `item`, best first.
    pub alternates: Vec<ScoredId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub reference: String,
    pub setting: Setting,
    /// One slot per target category, in canonical category order.
    pub slots: Vec<RecommendedSlot>,
}

impl Recommendation {
    pub fn outfit(&self) -> BTreeMap<Category, String> {
        self.slots.iter().map(|s| (s.category, s.item.id.clone())).collect()
    }
}

/// Picks one item per target category. Returns category → item id.
pub fn recommend_outfit(
    catalog: &Catalog,
    index: &VectorIndex,
    transformer: &TransformerParams,
    ref_id: &str,
    targets: &[Category],
    setting: Setting,
    seed: u64,
) -> Result<BTreeMap<Category, String>, RecommendError> {
    recommend_detailed(catalog, index, transformer, ref_id, targets, setting, seed, 0).map(|r| r.outfit())
}

/// Like [`recommend_outfit`], with scores and up to `alternates` runner-up
/// items per category.
#[allow(clippy::too_many_arguments)]
pub fn recommend_detailed(
    catalog: &Catalog,
    index: &VectorIndex,
    transformer: &TransformerParams,
    ref_id: &str,
    targets: &[Category],
    setting: Setting,
    seed: u64,
    alternates: usize,
) -> Result<Recommendation, RecommendError> {
    let item = catalog.get(ref_id).ok_or_else(|| RecommendError::UnknownItem(ref_id.to_owned()))?;
    let reference = PlacedItem {
        category: item.category,
        id: item.id.clone(),
        embedding: catalog.embedding(item).to_vec(),
    };
    let preds = transformer.recommend_embeddings(&reference, targets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots = Vec::with_capacity(preds.len());
    for (c, pred) in preds {
        let size = catalog.category_size(c);
        if size == 0 {
            return Err(RecommendError::EmptyCategory(c));
        }
        let depth = match setting {
            Setting::ToneSurTone => 1 + alternates,
            Setting::MixAndMatch => MIX_POOL.max(1 + alternates),
        };
        let pool = ranked_neighbors(catalog, index, &pred, Some(c), None, depth.min(size))?;
        let pick = match setting {
            Setting::ToneSurTone => 0,
            Setting::MixAndMatch => rng.random_range(0..pool.len().min(MIX_POOL)),
        };
        let scored = |i: usize| ScoredId {
            id: pool[i].id.clone(),
            score: pool[i].score,
        };
        slots.push(RecommendedSlot {
            category: c,
            item: scored(pick),
            alternates: (0..pool.len()).filter(|&i| i != pick).take(alternates).map(scored).collect(),
        });
    }
    Ok(Recommendation {
        reference: ref_id.to_owned(),
        setting,
        slots,
    })
}
