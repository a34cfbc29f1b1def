//! Item catalog and the precomputed embedding matrix behind it.
//!
//! Two files make up a catalog:
//!
//! * a line-delimited JSON file, one `{id, category, image_ref}` object per line;
//! * a `KKEM` embedding file: little-endian header (`"KKEM"`, `u32` version = 1,
//!   `u32` count, `u32` dim) followed by `count` records of
//!   `[u32 id length, id bytes, dim × f32]`.
//!
//! Rows are re-normalized on load so inner product equals cosine everywhere.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::vecmath;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"KKEM";
pub const EMBEDDING_VERSION: u32 = 1;
pub const DEFAULT_DIM: usize = 640;
pub const NORM_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("dimension mismatch for {id:?}: expected {expected}, found {found}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("item {id:?} has unknown category {category:?}")]
    UnknownCategory { id: String, category: String },
    #[error("duplicate item id {0:?}")]
    DuplicateId(String),
    #[error("id sets differ: {only_in_catalog} only in catalog (e.g. {example_catalog:?}), {only_in_embeddings} only in embeddings (e.g. {example_embeddings:?})")]
    IdSetMismatch {
        only_in_catalog: usize,
        only_in_embeddings: usize,
        example_catalog: Option<String>,
        example_embeddings: Option<String>,
    },
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("embedding for {0:?} is zero or non-finite and cannot be normalized")]
    ZeroVector(String),
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("embedding file: {0}")]
    Decode(#[from] DecodeError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The ten garment categories, in slot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Bags,
    Tops,
    Outerwear,
    Hats,
    Bottoms,
    Scarves,
    Jewelry,
    Accessories,
    Shoes,
    Sunglasses,
}

impl Category {
    pub const COUNT: usize = 10;

    pub const ALL: [Category; Category::COUNT] = [
        Category::Bags,
        Category::Tops,
        Category::Outerwear,
        Category::Hats,
        Category::Bottoms,
        Category::Scarves,
        Category::Jewelry,
        Category::Accessories,
        Category::Shoes,
        Category::Sunglasses,
    ];

    /// Position in the canonical ordering; also the positional slot in outfit sequences.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Category> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Bags => "bags",
            Category::Tops => "tops",
            Category::Outerwear => "outerwear",
            Category::Hats => "hats",
            Category::Bottoms => "bottoms",
            Category::Scarves => "scarves",
            Category::Jewelry => "jewelry",
            Category::Accessories => "accessories",
            Category::Shoes => "shoes",
            Category::Sunglasses => "sunglasses",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown category {0:?}")]
pub struct ParseCategoryError(pub String);

impl FromStr for Category {
    type Err = ParseCategoryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| ParseCategoryError(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Item {
    pub id: String,
    pub category: Category,
    pub image_ref: String,
    pub embedding_row: usize,
}

/// Dense row-major matrix of unit vectors, with the item id of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
}

impl EmbeddingStore {
    /// Builds a store from raw vectors, normalizing every row.
    pub fn from_vectors<I>(dim: usize, rows: I) -> Result<Self, CatalogError>
    where
        I: IntoIterator<Item = (String, Vec<f32>)>,
    {
        if dim == 0 {
            return Err(CatalogError::ZeroDim);
        }
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut seen = HashSet::new();
        for (id, v) in rows {
            if v.len() != dim {
                return Err(CatalogError::DimensionMismatch {
                    id,
                    expected: dim,
                    found: v.len(),
                });
            }
            if !seen.insert(id.clone()) {
                return Err(CatalogError::DuplicateId(id));
            }
            let unit = vecmath::normalized(&v).ok_or_else(|| CatalogError::ZeroVector(id.clone()))?;
            data.extend_from_slice(&unit);
            ids.push(id);
        }
        Ok(Self { dim, ids, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn id(&self, r: usize) -> &str {
        &self.ids[r]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Row position of `id`, by linear scan. Catalog keeps a hashed lookup.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// SHA-256 over dim, ids and the raw row bytes. Used to bind persisted
    /// indexes to the store they were built from.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        h.update((self.ids.len() as u64).to_le_bytes());
        for id in &self.ids {
            h.update((id.len() as u64).to_le_bytes());
            h.update(id.as_bytes());
        }
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_embeddings(
            self.dim,
            self.ids.iter().enumerate().map(|(r, id)| (id.as_str(), self.row(r))),
        )
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CatalogError> {
        let (dim, rows) = decode_embeddings(bytes)?;
        Self::from_vectors(dim, rows)
    }

    pub fn read(path: &Path) -> Result<Self, CatalogError> {
        let bytes = std::fs::read(path).map_err(|source| CatalogError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

/// Serializes rows in the `KKEM` layout. Vectors are written as given.
pub fn encode_embeddings<'a, I>(dim: usize, rows: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a [f32])>,
    I::IntoIter: ExactSizeIterator,
{
    let rows = rows.into_iter();
    let mut w = Writer::new();
    w.bytes(EMBEDDING_MAGIC);
    w.u32(EMBEDDING_VERSION);
    w.u32(rows.len() as u32);
    w.u32(dim as u32);
    for (id, v) in rows {
        assert_eq!(v.len(), dim, "row {id:?} has wrong dimension");
        w.string(id);
        w.f32_slice(v);
    }
    w.into_bytes()
}

/// Parses a `KKEM` buffer into `(dim, [(id, raw vector)])` without normalizing.
pub fn decode_embeddings(bytes: &[u8]) -> Result<(usize, Vec<(String, Vec<f32>)>), DecodeError> {
    let mut r = Reader::new(bytes);
    r.magic(EMBEDDING_MAGIC)?;
    r.version(EMBEDDING_VERSION)?;
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    // Cheap sanity bound before allocating: each record needs at least 4 + 4·dim bytes.
    let min_record = 4 + 4 * dim;
    if count.saturating_mul(min_record) > r.remaining() {
        return Err(DecodeError::Truncated {
            offset: r.position(),
            needed: count * min_record - r.remaining(),
        });
    }
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.string()?;
        let v = r.f32_vec(dim)?;
        rows.push((id, v));
    }
    r.finish()?;
    Ok((dim, rows))
}

#[derive(Debug, Deserialize)]
struct CatalogRecord {
    id: String,
    category: String,
    image_ref: String,
}

/// Immutable catalog: items in file order plus their embedding store.
#[derive(Debug, Clone)]
pub struct Catalog {
    items: Vec<Item>,
    store: Arc<EmbeddingStore>,
    by_id: HashMap<String, usize>,
    by_row: Vec<usize>,
    by_category: [Vec<usize>; Category::COUNT],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemSpec {
    pub id: String,
    pub category: Category,
    pub image_ref: String,
}

impl Catalog {
    /// Joins item records with an embedding store. Items keep the order of
    /// `items`; each item's embedding row is looked up by id.
    pub fn new(items: Vec<ItemSpec>, store: EmbeddingStore) -> Result<Self, CatalogError> {
        let row_of: HashMap<&str, usize> = store
            .ids()
            .iter()
            .enumerate()
            .map(|(r, id)| (id.as_str(), r))
            .collect();

        let mut by_id = HashMap::with_capacity(items.len());
        let mut out = Vec::with_capacity(items.len());
        let mut missing = Vec::new();
        for spec in items {
            if by_id.contains_key(&spec.id) {
                return Err(CatalogError::DuplicateId(spec.id));
            }
            match row_of.get(spec.id.as_str()) {
                Some(&row) => {
                    by_id.insert(spec.id.clone(), out.len());
                    out.push(Item {
                        id: spec.id,
                        category: spec.category,
                        image_ref: spec.image_ref,
                        embedding_row: row,
                    });
                }
                None => missing.push(spec.id),
            }
        }
        let extra: Vec<&String> = store.ids().iter().filter(|id| !by_id.contains_key(*id)).collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(CatalogError::IdSetMismatch {
                only_in_catalog: missing.len(),
                only_in_embeddings: extra.len(),
                example_catalog: missing.first().cloned(),
                example_embeddings: extra.first().map(|s| (*s).clone()),
            });
        }

        let mut by_row = vec![0; store.len()];
        let mut by_category: [Vec<usize>; Category::COUNT] = Default::default();
        for (i, item) in out.iter().enumerate() {
            by_row[item.embedding_row] = i;
            by_category[item.category.index()].push(i);
        }
        Ok(Self {
            items: out,
            store: Arc::new(store),
            by_id,
            by_row,
            by_category,
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn store(&self) -> &Arc<EmbeddingStore> {
        &self.store
    }

    pub fn dim(&self) -> usize {
        self.store.dim()
    }

    pub fn get(&self, id: &str) -> Option<&Item> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    pub fn item_at_row(&self, row: usize) -> &Item {
        &self.items[self.by_row[row]]
    }

    pub fn embedding(&self, item: &Item) -> &[f32] {
        self.store.row(item.embedding_row)
    }

    /// Items of one category, in file order.
    pub fn items_by_category(&self, c: Category) -> impl ExactSizeIterator<Item = &Item> + '_ {
        self.by_category[c.index()].iter().map(|&i| &self.items[i])
    }

    pub fn category_size(&self, c: Category) -> usize {
        self.by_category[c.index()].len()
    }
}

/// Parses the JSON-lines item file.
pub fn parse_catalog_records(text: &str) -> Result<Vec<ItemSpec>, CatalogError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CatalogRecord = serde_json::from_str(line).map_err(|e| CatalogError::MalformedRecord {
            line: n + 1,
            reason: e.to_string(),
        })?;
        let category = rec.category.parse().map_err(|_| CatalogError::UnknownCategory {
            id: rec.id.clone(),
            category: rec.category.clone(),
        })?;
        out.push(ItemSpec {
            id: rec.id,
            category,
            image_ref: rec.image_ref,
        });
    }
    Ok(out)
}

pub fn load_catalog(catalog_path: &Path, embeddings_path: &Path) -> Result<Catalog, CatalogError> {
    load_catalog_with_dim(catalog_path, embeddings_path, None)
}

/// Like [`load_catalog`], additionally rejecting an embedding file whose
/// declared dimension differs from `expected_dim`.
pub fn load_catalog_with_dim(
    catalog_path: &Path,
    embeddings_path: &Path,
    expected_dim: Option<usize>,
) -> Result<Catalog, CatalogError> {
    let text = std::fs::read_to_string(catalog_path).map_err(|source| CatalogError::Io {
        path: catalog_path.display().to_string(),
        source,
    })?;
    let specs = parse_catalog_records(&text)?;
    let bytes = std::fs::read(embeddings_path).map_err(|source| CatalogError::Io {
        path: embeddings_path.display().to_string(),
        source,
    })?;
    let (dim, rows) = decode_embeddings(&bytes)?;
    if let Some(expected) = expected_dim {
        if expected != dim {
            return Err(CatalogError::DimensionMismatch {
                id: embeddings_path.display().to_string(),
                expected,
                found: dim,
            });
        }
    }
    let store = EmbeddingStore::from_vectors(dim, rows)?;
    Catalog::new(specs, store)
}

/// Writes a catalog's two files. Used by fixture generators.
pub fn write_catalog_files(
    items: &[(String, Category, String)],
    dim: usize,
    vectors: &[Vec<f32>],
    catalog_path: &Path,
    embeddings_path: &Path,
) -> std::io::Result<()> {
    let mut text = String::new();
    for (id, cat, image_ref) in items {
        let line = serde_json::json!({"id": id, "category": cat.name(), "image_ref": image_ref});
        text.push_str(&line.to_string());
        text.push('\n');
    }
    std::fs::write(catalog_path, text)?;
    let bytes = encode_embeddings(
        dim,
        items.iter().zip(vectors).map(|((id, _, _), v)| (id.as_str(), v.as_slice())),
    );
    std::fs::write(embeddings_path, bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: &str, c: Category) -> ItemSpec {
        ItemSpec {
            id: id.into(),
            category: c,
            image_ref: format!("img/{id}.png"),
        }
    }

    fn store(rows: &[(&str, Vec<f32>)]) -> EmbeddingStore {
        EmbeddingStore::from_vectors(rows[0].1.len(), rows.iter().map(|(id, v)| (id.to_string(), v.clone()))).unwrap()
    }

    #[test]
    fn category_order_is_fixed() {
        let names: Vec<&str> = Category::ALL.iter().map(|c| c.name()).collect();
        assert_eq!(
            names,
            ["bags", "tops", "outerwear", "hats", "bottoms", "scarves", "jewelry", "accessories", "shoes", "sunglasses"]
        );
        for (i, c) in Category::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(Category::from_index(i), Some(*c));
            assert_eq!(c.name().parse::<Category>().unwrap(), *c);
        }
        assert!("dresses".parse::<Category>().is_err());
    }

    #[test]
    fn rows_are_normalized() {
        let s = store(&[("a", vec![3.0, 4.0, 0.0, 0.0]), ("b", vec![0.0, 0.0, 0.0, 2.0]), ("c", vec![1.0, 1.0, 1.0, 1.0])]);
        assert_eq!(s.len(), 3);
        for r in 0..3 {
            assert!((vecmath::norm(s.row(r)) - 1.0).abs() <= NORM_TOLERANCE);
        }
    }

    #[test]
    fn zero_rows_are_rejected() {
        let err = EmbeddingStore::from_vectors(2, vec![("z".to_string(), vec![0.0, 0.0])]).unwrap_err();
        assert!(matches!(err, CatalogError::ZeroVector(id) if id == "z"));
    }

    #[test]
    fn short_vector_is_a_dimension_mismatch() {
        let err = EmbeddingStore::from_vectors(640, vec![("a".to_string(), vec![1.0; 512])]).unwrap_err();
        assert!(matches!(
            err,
            CatalogError::DimensionMismatch { expected: 640, found: 512, .. }
        ));
    }

    #[test]
    fn items_by_category_filters_in_file_order() {
        let s = store(&[("A", vec![1.0, 0.0]), ("B", vec![0.0, 1.0]), ("C", vec![1.0, 1.0])]);
        let cat = Catalog::new(
            vec![spec("A", Category::Tops), spec("B", Category::Shoes), spec("C", Category::Tops)],
            s,
        )
        .unwrap();
        let tops: Vec<&str> = cat.items_by_category(Category::Tops).map(|i| i.id.as_str()).collect();
        assert_eq!(tops, ["A", "C"]);
        assert_eq!(cat.items_by_category(Category::Hats).len(), 0);
        let mut all: Vec<&str> = Category::ALL
            .iter()
            .flat_map(|c| cat.items_by_category(*c).map(|i| i.id.as_str()))
            .collect();
        all.sort();
        assert_eq!(all, ["A", "B", "C"]);
    }

    #[test]
    fn id_set_mismatch_is_reported() {
        let s = store(&[("A", vec![1.0, 0.0]), ("B", vec![0.0, 1.0])]);
        let err = Catalog::new(vec![spec("A", Category::Tops), spec("X", Category::Tops)], s).unwrap_err();
        match err {
            CatalogError::IdSetMismatch {
                only_in_catalog,
                only_in_embeddings,
                ..
            } => assert_eq!((only_in_catalog, only_in_embeddings), (1, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_category_names_the_item() {
        let err = parse_catalog_records(r#"{"id":"d1","category":"dresses","image_ref":"x.png"}"#).unwrap_err();
        match err {
            CatalogError::UnknownCategory { id, category } => {
                assert_eq!(id, "d1");
                assert_eq!(category, "dresses");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"id\":\"a\",\"category\":\"tops\",\"image_ref\":\"a.png\"}\nnot json\n";
        assert!(matches!(
            parse_catalog_records(text),
            Err(CatalogError::MalformedRecord { line: 2, .. })
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let s = store(&[("A", vec![1.0, 0.0])]);
        let err = Catalog::new(vec![spec("A", Category::Tops), spec("A", Category::Bags)], s).unwrap_err();
        assert!(matches!(err, CatalogError::DuplicateId(id) if id == "A"));
        let err = EmbeddingStore::from_vectors(1, vec![("A".into(), vec![1.0]), ("A".into(), vec![2.0])]).unwrap_err();
        assert!(matches!(err, CatalogError::DuplicateId(_)));
    }

    #[test]
    fn truncated_embedding_file() {
        let s = store(&[("A", vec![1.0, 0.0]), ("B", vec![0.0, 1.0])]);
        let bytes = s.encode();
        assert!(matches!(
            EmbeddingStore::decode(&bytes[..bytes.len() - 3]),
            Err(CatalogError::Decode(DecodeError::Truncated { .. }))
        ));
        assert_eq!(EmbeddingStore::decode(&bytes).unwrap(), s);
    }
}
