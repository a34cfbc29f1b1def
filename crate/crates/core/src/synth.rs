//! Seeded synthetic data: Gaussian vector stores for index benchmarks and a
//! style-cluster outfit task for the recommender.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::catalog::{Catalog, Category, EmbeddingStore, ItemSpec};
use crate::combiner::Triple;
use crate::index::VectorIndex;
use crate::retrieval::ranked_neighbors;
use crate::transformer::{Outfit, OutfitItemRef, PlacedItem, TransformerParams};
use crate::vecmath::normalized;

/// `n` standard-normal vectors of length `dim` (not normalized).
pub fn gaussian_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

/// Store of `n` unit-normalized Gaussian vectors with ids `v0000000`, `v0000001`, …
pub fn gaussian_store(n: usize, dim: usize, seed: u64) -> EmbeddingStore {
    let rows = gaussian_vectors(n, dim, seed)
        .into_iter()
        .enumerate()
        .map(|(i, v)| (format!("v{i:07}"), v));
    EmbeddingStore::from_vectors(dim, rows).expect("gaussian rows are non-zero")
}

/// Parameters of the synthetic style-cluster outfit task.
///
/// Every cluster has a direction `u_k` (the set is centred to zero mean) and
/// every category a direction `m_c`; an item of cluster `k` and category `c`
/// embeds as `normalize(u_k + category_weight·m_c + noise·ε)` with
/// `ε ~ N(0, I/dim)`.
/// Item 0 of every (cluster, category) cell is held out of training and
/// serves as an evaluation reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StyleClusterSpec {
    pub clusters: usize,
    pub items_per_cell: usize,
    pub outfits_per_cluster: usize,
    pub dim: usize,
    pub category_weight: f32,
    pub noise: f32,
    pub seed: u64,
}

impl Default for StyleClusterSpec {
    fn default() -> Self {
        Self {
            clusters: 20,
            items_per_cell: 6,
            outfits_per_cluster: 20,
            dim: 32,
            category_weight: 0.0,
            noise: 0.35,
            seed: 11,
        }
    }
}

pub struct StyleClusterTask {
    pub catalog: Catalog,
    pub train_outfits: Vec<Outfit>,
    /// Held-out item ids, never part of a training outfit.
    pub held_out: Vec<String>,
    cluster_of: HashMap<String, usize>,
}

impl StyleClusterTask {
    pub fn cluster_of(&self, id: &str) -> Option<usize> {
        self.cluster_of.get(id).copied()
    }
}

fn unit(v: Vec<f32>) -> Vec<f32> {
    normalized(&v).expect("gaussian draw is non-zero")
}

pub fn style_cluster_task(spec: &StyleClusterSpec) -> StyleClusterTask {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..d).map(|_| StandardNormal.sample(rng)).collect() };
    let mut clusters: Vec<Vec<f32>> = (0..spec.clusters).map(|_| unit(draw(&mut rng))).collect();
    // Centre the cluster directions. The outfit loss sums raw negative
    // cosines, so a shared mean direction would let a model score well by
    // pointing away from it, ignoring the clusters.
    if spec.clusters > 1 {
        let mean: Vec<f32> = (0..d)
            .map(|i| clusters.iter().map(|u| u[i]).sum::<f32>() / spec.clusters as f32)
            .collect();
        for u in &mut clusters {
            let centred: Vec<f32> = u.iter().zip(&mean).map(|(a, m)| a - m).collect();
            *u = unit(centred);
        }
    }
    let cats: Vec<Vec<f32>> = (0..Category::COUNT).map(|_| unit(draw(&mut rng))).collect();
    let scale = spec.noise / (d as f32).sqrt();

    let id_of = |k: usize, c: Category, j: usize| format!("s{k:02}-{c}-{j}");
    let mut specs = Vec::new();
    let mut rows = Vec::new();
    let mut cluster_of = HashMap::new();
    let mut held_out = Vec::new();
    for (k, u) in clusters.iter().enumerate() {
        for c in Category::ALL {
            for j in 0..spec.items_per_cell {
                let eps = draw(&mut rng);
                let v: Vec<f32> = (0..d)
                    .map(|i| u[i] + spec.category_weight * cats[c.index()][i] + scale * eps[i])
                    .collect();
                let id = id_of(k, c, j);
                cluster_of.insert(id.clone(), k);
                if j == 0 {
                    held_out.push(id.clone());
                }
                specs.push(ItemSpec {
                    id: id.clone(),
                    category: c,
                    image_ref: format!("images/{id}.png"),
                });
                rows.push((id, v));
            }
        }
    }
    let store = EmbeddingStore::from_vectors(d, rows).expect("synthetic rows are valid");
    let catalog = Catalog::new(specs, store).expect("synthetic catalog is consistent");

    let mut train_outfits = Vec::new();
    for k in 0..spec.clusters {
        for o in 0..spec.outfits_per_cluster {
            let size = rng.random_range(2..=Category::COUNT);
            let picked = rand::seq::index::sample(&mut rng, Category::COUNT, size);
            let mut items: Vec<OutfitItemRef> = picked
                .into_iter()
                .map(|ci| {
                    let c = Category::from_index(ci).expect("index < COUNT");
                    let j = rng.random_range(1..spec.items_per_cell.max(2));
                    OutfitItemRef { id: id_of(k, c, j), category: c }
                })
                .collect();
            items.sort_by_key(|it| it.category);
            train_outfits.push(Outfit {
                outfit_id: format!("o{k:02}-{o:03}"),
                items,
            });
        }
    }
    StyleClusterTask {
        catalog,
        train_outfits,
        held_out,
        cluster_of,
    }
}

/// Fraction of (held-out reference, target category) pairs whose top-1
/// same-category neighbor of the prediction shares the reference's cluster.
/// Each reference gets `n_out` target categories drawn with `seed`.
pub fn cluster_hit_rate(
    task: &StyleClusterTask,
    params: &TransformerParams,
    index: &VectorIndex,
    n_out: usize,
    seed: u64,
) -> Result<f64, Box<dyn std::error::Error + Send + Sync>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hits, mut total) = (0usize, 0usize);
    for id in &task.held_out {
        let item = task.catalog.get(id).ok_or("held-out id missing")?;
        let others: Vec<Category> = Category::ALL.into_iter().filter(|&c| c != item.category).collect();
        let targets: Vec<Category> = rand::seq::index::sample(&mut rng, others.len(), n_out.min(others.len()))
            .into_iter()
            .map(|i| others[i])
            .collect();
        let reference = PlacedItem {
            category: item.category,
            id: item.id.clone(),
            embedding: task.catalog.embedding(item).to_vec(),
        };
        for (c, pred) in params.recommend_embeddings(&reference, &targets)? {
            let top = ranked_neighbors(&task.catalog, index, &pred, Some(c), None, 1)?;
            total += 1;
            if task.cluster_of(&top[0].id) == task.cluster_of(id) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Parameters of the synthetic text-feedback task: each triple pairs a
/// reference with a random "text" vector, and the target is
/// `normalize(reference + text)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackSpec {
    pub train_triples: usize,
    pub held_out: usize,
    /// Catalog items that are neither a held-out reference nor a target.
    pub distractors: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for FeedbackSpec {
    fn default() -> Self {
        Self {
            train_triples: 200,
            held_out: 50,
            distractors: 1000,
            dim: 32,
            seed: 3,
        }
    }
}

pub struct FeedbackQuery {
    pub reference_id: String,
    pub text: Vec<f32>,
    pub target_id: String,
}

pub struct FeedbackTask {
    pub catalog: Catalog,
    pub train: Vec<Triple>,
    /// Queries whose reference and target live in the catalog and whose
    /// vectors were not seen in training.
    pub held_out: Vec<FeedbackQuery>,
}

pub fn feedback_task(spec: &FeedbackSpec) -> FeedbackTask {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let mut draw = || -> Vec<f32> { unit((0..d).map(|_| StandardNormal.sample(&mut rng)).collect()) };
    let mut triple = || {
        let reference = draw();
        let text = draw();
        let target = unit(reference.iter().zip(&text).map(|(a, b)| a + b).collect());
        Triple { reference, text, target }
    };
    let train: Vec<Triple> = (0..spec.train_triples).map(|_| triple()).collect();
    let held: Vec<Triple> = (0..spec.held_out).map(|_| triple()).collect();
    let distractors: Vec<Vec<f32>> = (0..spec.distractors).map(|_| draw()).collect();

    let mut rows = Vec::new();
    let mut held_out = Vec::new();
    for (i, t) in held.into_iter().enumerate() {
        let (r, g) = (format!("ref-{i:04}"), format!("tgt-{i:04}"));
        rows.push((r.clone(), t.reference));
        rows.push((g.clone(), t.target));
        held_out.push(FeedbackQuery {
            reference_id: r,
            text: t.text,
            target_id: g,
        });
    }
    rows.extend(distractors.into_iter().enumerate().map(|(i, v)| (format!("d-{i:05}"), v)));
    let specs = rows
        .iter()
        .enumerate()
        .map(|(i, (id, _))| ItemSpec {
            id: id.clone(),
            category: Category::ALL[i % Category::COUNT],
            image_ref: format!("images/{id}.png"),
        })
        .collect();
    let store = EmbeddingStore::from_vectors(d, rows).expect("synthetic rows are valid");
    FeedbackTask {
        catalog: Catalog::new(specs, store).expect("synthetic catalog is consistent"),
        train,
        held_out,
    }
}
