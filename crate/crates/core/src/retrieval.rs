//! Similar-item retrieval, tiered result augmentation and text-feedback search.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, Category};
use crate::combiner::{CombinerError, CombinerParams};
use crate::index::{IndexError, Neighbor, SearchParams, VectorIndex};
use crate::vecmath::dot;

/// How deep the oracle ranking handed to [`augment_results`] goes; the
/// deepest band ends at rank 1000.
pub const RANKING_DEPTH: usize = 1000;

/// Rank bands (1-indexed, inclusive) sampled for the lower tiers.
pub const APPROXIMATE_BAND: (usize, usize) = (10, 100);
pub const HEURISTIC_BAND: (usize, usize) = (500, 1000);

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("unknown item {0:?}")]
    UnknownItem(String),
    #[error("category {category} has {available} candidates besides the reference, {needed} requested")]
    InsufficientPopulation {
        category: Category,
        available: usize,
        needed: usize,
    },
    #[error("n = {0} is too small; augmentation needs n >= 4")]
    NTooSmall(usize),
    #[error("empty ranking")]
    EmptyRanking,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("index does not cover the catalog's embedding store")]
    StoreMismatch,
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Combiner(#[from] CombinerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Tier {
    Accurate,
    Approximate,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TieredEntry {
    pub id: String,
    pub tier: Tier,
    /// 1-indexed position in the oracle ranking the entry was taken from.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TieredResults {
    pub entries: Vec<TieredEntry>,
    pub n: usize,
}

/// Sizes of the accurate, approximate and heuristic tiers for `n` results.
pub fn tier_sizes(n: usize) -> (usize, usize, usize) {
    let a = n.div_ceil(2);
    let b = n.div_ceil(4);
    (a, b, n - a - b)
}

fn check_store(catalog: &Catalog, index: &VectorIndex) -> Result<(), RetrievalError> {
    let (s, t) = (catalog.store(), index.store());
    if std::sync::Arc::ptr_eq(s, t) || (s.len() == t.len() && s.dim() == t.dim() && s.ids() == t.ids()) {
        Ok(())
    } else {
        Err(RetrievalError::StoreMismatch)
    }
}

/// Best `n` items for query `q`, optionally restricted to one category and
/// excluding one row. Over-fetches `4n` from the index and doubles until
/// enough rows survive the filter. Should the index run dry (approximate
/// kinds may return fewer than `k` hits), the remainder comes from an exact
/// scan so callers always get the full `n`.
pub fn ranked_neighbors(
    catalog: &Catalog,
    index: &VectorIndex,
    q: &[f32],
    category: Option<Category>,
    exclude_row: Option<usize>,
    n: usize,
) -> Result<Vec<Neighbor>, RetrievalError> {
    check_store(catalog, index)?;
    if q.len() != catalog.dim() {
        return Err(RetrievalError::DimensionMismatch {
            expected: catalog.dim(),
            found: q.len(),
        });
    }
    let count = index.len();
    let in_category = |row: usize| category.is_none_or(|c| catalog.item_at_row(row).category == c);
    let keep = |row: usize| Some(row) != exclude_row && in_category(row);
    let population = category.map_or(catalog.len(), |c| catalog.category_size(c));
    let available = population - exclude_row.filter(|&r| r < count && in_category(r)).map_or(0, |_| 1);
    let n = n.min(available);
    if n == 0 {
        return Ok(Vec::new());
    }

    let mut fetch = (4 * n).min(count);
    loop {
        let hits = index.search_rows(q, fetch, SearchParams::default())?;
        let returned = hits.len();
        let survivors: Vec<(u32, f32)> = hits.into_iter().filter(|&(r, _)| keep(r as usize)).collect();
        if survivors.len() >= n {
            return Ok(to_neighbors(catalog, survivors.into_iter().take(n)));
        }
        if fetch == count || returned < fetch {
            break;
        }
        fetch = (fetch * 2).min(count);
    }
    Ok(to_neighbors(catalog, exact_ranking(catalog, q, &keep, n).into_iter()))
}

/// Exact top-`n` by cosine among rows passing `keep`, ties by ascending id.
fn exact_ranking(catalog: &Catalog, q: &[f32], keep: &dyn Fn(usize) -> bool, n: usize) -> Vec<(u32, f32)> {
    let store = catalog.store();
    let mut q = q.to_vec();
    let norm = crate::vecmath::norm(&q);
    if norm > 0.0 {
        q.iter_mut().for_each(|x| *x /= norm);
    }
    let mut all: Vec<(u32, f32)> = (0..store.len())
        .filter(|&r| keep(r))
        .map(|r| (r as u32, dot(&q, store.row(r))))
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| store.id(a.0 as usize).cmp(store.id(b.0 as usize))));
    all.truncate(n);
    all
}

fn to_neighbors(catalog: &Catalog, rows: impl Iterator<Item = (u32, f32)>) -> Vec<Neighbor> {
    rows.map(|(row, score)| Neighbor {
        id: catalog.store().id(row as usize).to_owned(),
        row: row as usize,
        score,
    })
    .collect()
}

/// Top-`n` items of the reference's category by cosine to the reference,
/// excluding the reference itself.
pub fn similar_items(
    catalog: &Catalog,
    index: &VectorIndex,
    ref_id: &str,
    n: usize,
) -> Result<Vec<Neighbor>, RetrievalError> {
    let item = catalog.get(ref_id).ok_or_else(|| RetrievalError::UnknownItem(ref_id.to_owned()))?;
    let available = catalog.category_size(item.category) - 1;
    if available < n || available == 0 {
        return Err(RetrievalError::InsufficientPopulation {
            category: item.category,
            available,
            needed: n,
        });
    }
    ranked_neighbors(
        catalog,
        index,
        catalog.embedding(item),
        Some(item.category),
        Some(item.embedding_row),
        n,
    )
}

/// Composes `n` results from an exact ranking: the top `⌈n/2⌉` verbatim,
/// then `⌈n/4⌉` sampled from ranks 10..=100, then the rest sampled from
/// ranks 500..=1000. Bands are clipped to the ranking; whatever a band
/// cannot supply is filled from the best unused ranks and tagged heuristic.
pub fn augment_results<S: AsRef<str>>(ranking: &[S], n: usize, seed: u64) -> Result<TieredResults, RetrievalError> {
    if n < 4 {
        return Err(RetrievalError::NTooSmall(n));
    }
    if ranking.is_empty() {
        return Err(RetrievalError::EmptyRanking);
    }
    let (a, b, c) = tier_sizes(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = vec![false; ranking.len()];
    let mut entries = Vec::with_capacity(n);
    let take = |i: usize, tier: Tier, entries: &mut Vec<TieredEntry>, used: &mut Vec<bool>| {
        used[i] = true;
        entries.push(TieredEntry {
            id: ranking[i].as_ref().to_owned(),
            tier,
            rank: i + 1,
        });
    };

    for i in 0..a.min(ranking.len()) {
        take(i, Tier::Accurate, &mut entries, &mut used);
    }
    for (want, (lo, hi), tier) in [(b, APPROXIMATE_BAND, Tier::Approximate), (c, HEURISTIC_BAND, Tier::Heuristic)] {
        let pool: Vec<usize> = (lo - 1..hi.min(ranking.len())).filter(|&i| !used[i]).collect();
        let picked = want.min(pool.len());
        for p in sample(&mut rng, pool.len(), picked) {
            take(pool[p], tier, &mut entries, &mut used);
        }
        let mut shortfall = want - picked;
        let mut i = 0;
        while shortfall > 0 && i < ranking.len() {
            if !used[i] {
                take(i, Tier::Heuristic, &mut entries, &mut used);
                shortfall -= 1;
            }
            i += 1;
        }
    }
    Ok(TieredResults { entries, n })
}

/// Similar items of the reference, augmented into tiers.
pub fn similar_tiered(
    catalog: &Catalog,
    index: &VectorIndex,
    ref_id: &str,
    n: usize,
    seed: u64,
) -> Result<TieredResults, RetrievalError> {
    if n < 4 {
        return Err(RetrievalError::NTooSmall(n));
    }
    let item = catalog.get(ref_id).ok_or_else(|| RetrievalError::UnknownItem(ref_id.to_owned()))?;
    let available = catalog.category_size(item.category) - 1;
    if available < n {
        return Err(RetrievalError::InsufficientPopulation {
            category: item.category,
            available,
            needed: n,
        });
    }
    let ranking = similar_items(catalog, index, ref_id, available.min(RANKING_DEPTH))?;
    let ids: Vec<&str> = ranking.iter().map(|h| h.id.as_str()).collect();
    augment_results(&ids, n, seed)
}

/// Top-`n` items over the whole catalog for the combined (reference, text)
/// query, excluding the reference.
pub fn feedback_search(
    catalog: &Catalog,
    index: &VectorIndex,
    ref_id: &str,
    text_embedding: &[f32],
    n: usize,
    combiner: &CombinerParams,
) -> Result<Vec<Neighbor>, RetrievalError> {
    let item = catalog.get(ref_id).ok_or_else(|| RetrievalError::UnknownItem(ref_id.to_owned()))?;
    if text_embedding.len() != catalog.dim() {
        return Err(RetrievalError::DimensionMismatch {
            expected: catalog.dim(),
            found: text_embedding.len(),
        });
    }
    let q = combiner.combine(catalog.embedding(item), text_embedding)?;
    ranked_neighbors(catalog, index, &q, None, Some(item.embedding_row), n)
}

/// Feedback search followed by tier augmentation.
#[allow(clippy::too_many_arguments)]
pub fn feedback_tiered(
    catalog: &Catalog,
    index: &VectorIndex,
    ref_id: &str,
    text_embedding: &[f32],
    n: usize,
    combiner: &CombinerParams,
    seed: u64,
) -> Result<TieredResults, RetrievalError> {
    if n < 4 {
        return Err(RetrievalError::NTooSmall(n));
    }
    let ranking = feedback_search(catalog, index, ref_id, text_embedding, RANKING_DEPTH, combiner)?;
    let ids: Vec<&str> = ranking.iter().map(|h| h.id.as_str()).collect();
    augment_results(&ids, n, seed)
}

/// Checks the tier contract of `res` against the ranking it came from.
/// Returns a description of every violation found.
pub fn tier_violations<S: AsRef<str>>(ranking: &[S], res: &TieredResults) -> Vec<String> {
    let mut out = Vec::new();
    let (a, b, c) = tier_sizes(res.n);
    let expected_len = res.n.min(ranking.len());
    if res.entries.len() != expected_len {
        out.push(format!("length {} != {expected_len}", res.entries.len()));
    }
    let mut seen = HashSet::new();
    for (pos, e) in res.entries.iter().enumerate() {
        if !seen.insert(e.id.as_str()) {
            out.push(format!("duplicate id {} at {pos}", e.id));
        }
        if e.rank == 0 || e.rank > ranking.len() || ranking[e.rank - 1].as_ref() != e.id {
            out.push(format!("entry {pos} does not sit at its claimed rank {}", e.rank));
            continue;
        }
        let full = ranking.len() >= HEURISTIC_BAND.1;
        let in_band = |(lo, hi): (usize, usize)| e.rank >= lo && e.rank <= hi;
        if pos < a {
            if e.tier != Tier::Accurate || e.rank != pos + 1 {
                out.push(format!("prefix entry {pos} is not rank {}", pos + 1));
            }
        } else if pos < a + b {
            let ok = match e.tier {
                Tier::Approximate => in_band(APPROXIMATE_BAND),
                Tier::Heuristic => !full,
                Tier::Accurate => false,
            };
            if !ok {
                out.push(format!("entry {pos} (rank {}) breaks the approximate band", e.rank));
            }
        } else if pos < a + b + c {
            let ok = e.tier == Tier::Heuristic && (!full || in_band(HEURISTIC_BAND));
            if !ok {
                out.push(format!("entry {pos} (rank {}) breaks the heuristic band", e.rank));
            }
        }
    }
    out
}
