use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::catalog::EmbeddingStore;

/// A scored row. `Ord` ranks better candidates higher: larger score first,
/// then lexicographically smaller item id.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Scored<'a> {
    pub score: f32,
    pub row: u32,
    pub id: &'a str,
}

impl Ord for Scored<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(self.id))
    }
}

impl PartialOrd for Scored<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Scored<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scored<'_> {}

/// Bounded collector keeping the `k` best candidates seen.
pub(crate) struct TopK<'a> {
    k: usize,
    heap: BinaryHeap<Reverse<Scored<'a>>>,
    store: &'a EmbeddingStore,
}

impl<'a> TopK<'a> {
    pub fn new(k: usize, store: &'a EmbeddingStore) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
            store,
        }
    }

    #[inline]
    pub fn push(&mut self, row: u32, score: f32) {
        if self.k == 0 {
            return;
        }
        if self.heap.len() < self.k {
            let id = self.store.id(row as usize);
            self.heap.push(Reverse(Scored { score, row, id }));
            return;
        }
        let worst = &self.heap.peek().expect("non-empty").0;
        if score < worst.score {
            return;
        }
        let cand = Scored {
            score,
            row,
            id: self.store.id(row as usize),
        };
        if cand > *worst {
            self.heap.pop();
            self.heap.push(Reverse(cand));
        }
    }

    /// Best-first list of `(row, score)`.
    pub fn into_sorted(self) -> Vec<(u32, f32)> {
        let mut v: Vec<Scored<'a>> = self.heap.into_iter().map(|r| r.0).collect();
        v.sort_unstable_by(|a, b| b.cmp(a));
        v.into_iter().map(|s| (s.row, s.score)).collect()
    }
}
