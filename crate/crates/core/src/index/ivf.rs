//! Inverted-file index: k-means coarse partitions, probe the closest few.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::topk::TopK;
use crate::catalog::EmbeddingStore;
use crate::codec::{DecodeError, Reader, Writer};
use crate::vecmath::{dot, squared_l2};

pub const KMEANS_MAX_ITERS: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    pub(crate) nlist: usize,
    pub(crate) centroids: Vec<f32>,
    pub(crate) lists: Vec<Vec<u32>>,
}

/// Score used for nearest-centroid assignment: argmax of `x·c − ‖c‖²/2`
/// equals argmin of `‖x − c‖²`.
#[inline]
fn centroid_score(x: &[f32], c: &[f32], half_sq: f32) -> f32 {
    dot(x, c) - half_sq
}

fn nearest_centroid(x: &[f32], centroids: &[f32], half_sq: &[f32], dim: usize) -> u32 {
    let mut best = 0u32;
    let mut best_score = f32::NEG_INFINITY;
    for (c, (cent, hs)) in centroids.chunks_exact(dim).zip(half_sq).enumerate() {
        let s = centroid_score(x, cent, *hs);
        if s > best_score {
            best_score = s;
            best = c as u32;
        }
    }
    best
}

/// Lloyd's k-means with seeded row-sample initialization. Returns the
/// centroid table and the final assignment of every row.
pub fn kmeans(store: &EmbeddingStore, k: usize, seed: u64, max_iters: usize) -> (Vec<f32>, Vec<u32>) {
    let dim = store.dim();
    let n = store.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = rand::seq::index::sample(&mut rng, n, k).into_vec();
    init.sort_unstable();
    let mut centroids: Vec<f32> = init.iter().flat_map(|&r| store.row(r).iter().copied()).collect();
    let mut assign = vec![u32::MAX; n];

    for iter in 0..=max_iters {
        let half_sq: Vec<f32> = centroids.chunks_exact(dim).map(|c| 0.5 * dot(c, c)).collect();
        let next: Vec<u32> = (0..n)
            .into_par_iter()
            .with_min_len(1024)
            .map(|r| nearest_centroid(store.row(r), &centroids, &half_sq, dim))
            .collect();
        let changed = next != assign;
        assign = next;
        if !changed || iter == max_iters {
            break;
        }

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (r, &c) in assign.iter().enumerate() {
            let c = c as usize;
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(store.row(r)) {
                *s += *x as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            for d in 0..dim {
                centroids[c * dim + d] = (sums[c * dim + d] * inv) as f32;
            }
        }

        // Empty clusters take the farthest member of the currently largest cluster.
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] != 0 {
                continue;
            }
            let largest = (0..k).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).expect("k > 0");
            let cent = centroids[largest * dim..(largest + 1) * dim].to_vec();
            let far = (0..n)
                .filter(|&r| assign[r] as usize == largest && !taken.contains(&r))
                .max_by(|&a, &b| {
                    squared_l2(store.row(a), &cent)
                        .total_cmp(&squared_l2(store.row(b), &cent))
                        .then(b.cmp(&a))
                });
            if let Some(r) = far {
                taken.push(r);
                centroids[c * dim..(c + 1) * dim].copy_from_slice(store.row(r));
                assign[r] = c as u32;
                counts[largest] -= 1;
                counts[c] = 1;
            }
        }
    }
    (centroids, assign)
}

impl IvfIndex {
    pub fn build(store: &EmbeddingStore, nlist: usize, seed: u64) -> Self {
        let (centroids, assign) = kmeans(store, nlist, seed, KMEANS_MAX_ITERS);
        let mut lists = vec![Vec::new(); nlist];
        for (r, &c) in assign.iter().enumerate() {
            lists[c as usize].push(r as u32);
        }
        Self {
            nlist,
            centroids,
            lists,
        }
    }

    pub fn search(&self, store: &EmbeddingStore, q: &[f32], k: usize, nprobe: usize) -> Vec<(u32, f32)> {
        let dim = store.dim();
        let nprobe = nprobe.clamp(1, self.nlist);
        let mut scored: Vec<(f32, u32)> = self
            .centroids
            .chunks_exact(dim)
            .enumerate()
            .map(|(c, cent)| (centroid_score(q, cent, 0.5 * dot(cent, cent)), c as u32))
            .collect();
        let by_score = |a: &(f32, u32), b: &(f32, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if nprobe < scored.len() {
            scored.select_nth_unstable_by(nprobe - 1, by_score);
            scored.truncate(nprobe);
        }
        let mut top = TopK::new(k, store);
        for &(_, c) in &scored {
            for &r in &self.lists[c as usize] {
                top.push(r, dot(q, store.row(r as usize)));
            }
        }
        top.into_sorted()
    }

    pub fn structure_bytes(&self) -> usize {
        let list_bytes: usize = self.lists.iter().map(|l| l.len() * 4 + std::mem::size_of::<Vec<u32>>()).sum();
        self.centroids.len() * 4 + list_bytes
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.u32(self.nlist as u32);
        w.f32_slice(&self.centroids);
        for l in &self.lists {
            w.u32(l.len() as u32);
            w.u32_slice(l);
        }
    }

    pub(crate) fn decode(r: &mut Reader<'_>, store: &EmbeddingStore) -> Result<Self, DecodeError> {
        let nlist = r.u32()? as usize;
        if nlist == 0 || nlist > store.len() {
            return Err(DecodeError::Invalid(format!("bad nlist {nlist}")));
        }
        let centroids = r.f32_vec(nlist * store.dim())?;
        let mut lists = Vec::with_capacity(nlist);
        let mut total = 0usize;
        for _ in 0..nlist {
            let len = r.u32()? as usize;
            let l = r.u32_vec(len)?;
            if l.iter().any(|&x| x as usize >= store.len()) {
                return Err(DecodeError::Invalid("row out of range".into()));
            }
            total += len;
            lists.push(l);
        }
        if total != store.len() {
            return Err(DecodeError::Invalid("lists do not cover the store".into()));
        }
        Ok(Self {
            nlist,
            centroids,
            lists,
        })
    }
}
