//! Hierarchical navigable small-world graph.
//!
//! Nodes are inserted in row order. Each node draws a top level from a
//! geometric distribution with `ml = 1 / ln(M)`; on every layer up to that
//! level it links to the `M` most similar nodes found by a beam search.
//! Neighbor lists are capped at `M` (upper layers) and `2·M` (layer 0) by
//! keeping the most similar entries.
//!
//! Layer 0 is one fixed-stride array so a hop touches a single contiguous
//! run; upper layers are sparse and kept per node.
//!
//! After construction nodes are renumbered breadth-first over layer 0 from
//! the entry point and the index keeps its own copy of the vectors in that
//! order, so graph neighbours mostly sit close together in memory. Node ids
//! below are these layout positions; `order` maps them back to store rows.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::topk::TopK;
use crate::catalog::EmbeddingStore;
use crate::codec::{DecodeError, Reader, Writer};
use crate::vecmath::dot;

const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct HnswIndex {
    pub(crate) m: usize,
    pub(crate) dim: usize,
    pub(crate) entry: u32,
    pub(crate) max_level: usize,
    /// `n × 2M` base-layer adjacency; row `i` holds `base_len[i]` valid entries.
    pub(crate) base: Vec<u32>,
    pub(crate) base_len: Vec<u32>,
    /// `upper[node][layer - 1]` for layers `1..=level(node)`.
    pub(crate) upper: Vec<Vec<Vec<u32>>>,
    /// Store row of each layout position.
    pub(crate) order: Vec<u32>,
    /// `n × dim` vectors in layout order.
    pub(crate) vectors: Vec<f32>,
}

/// Row-major vectors addressed by node id.
#[derive(Clone, Copy)]
struct Rows<'a> {
    data: &'a [f32],
    dim: usize,
}

impl<'a> Rows<'a> {
    #[inline]
    fn row(&self, i: usize) -> &'a [f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Copy, PartialEq, Debug)]
struct Cand {
    sim: f32,
    node: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim.total_cmp(&other.sim).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

trait Visited {
    /// Marks `node`; true when it was not marked before.
    fn insert(&mut self, node: u32) -> bool;
}

/// Per-query bitset.
struct BitVisited(Vec<u64>);

impl BitVisited {
    fn new(n: usize) -> Self {
        Self(vec![0; n.div_ceil(64)])
    }
}

impl Visited for BitVisited {
    #[inline]
    fn insert(&mut self, node: u32) -> bool {
        let (w, b) = ((node / 64) as usize, 1u64 << (node % 64));
        let fresh = self.0[w] & b == 0;
        self.0[w] |= b;
        fresh
    }
}

/// Generation-stamped marks, reused across the inserts of one build.
struct EpochVisited {
    marks: Vec<u32>,
    epoch: u32,
}

impl EpochVisited {
    fn reset(&mut self) {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.epoch = 1;
        }
    }
}

impl Visited for EpochVisited {
    #[inline]
    fn insert(&mut self, node: u32) -> bool {
        let m = &mut self.marks[node as usize];
        let fresh = *m != self.epoch;
        *m = self.epoch;
        fresh
    }
}

#[inline]
fn prefetch(v: &[f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        use std::arch::x86_64::{_mm_prefetch, _MM_HINT_T0};
        let p = v.as_ptr() as *const i8;
        // SAFETY: prefetch is only a hint and never faults.
        unsafe {
            _mm_prefetch(p, _MM_HINT_T0);
            if v.len() > 16 {
                _mm_prefetch(p.add(64), _MM_HINT_T0);
            }
        }
    }
    #[cfg(not(target_arch = "x86_64"))]
    let _ = v;
}

/// Edge similarities mirrored from the graph during construction so pruning
/// never recomputes dot products.
struct EdgeSims {
    base: Vec<f32>,
    upper: Vec<Vec<Vec<f32>>>,
}

impl HnswIndex {
    pub fn build(store: &EmbeddingStore, m: usize, ef_construction: usize, seed: u64) -> Self {
        let n = store.len();
        let cap0 = 2 * m;
        let ml = 1.0 / (m as f64).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = Rows {
            data: store.data(),
            dim: store.dim(),
        };
        let mut index = Self {
            m,
            dim: store.dim(),
            entry: 0,
            max_level: 0,
            base: vec![0; n * cap0],
            base_len: vec![0; n],
            upper: Vec::with_capacity(n),
            order: Vec::new(),
            vectors: Vec::new(),
        };
        let mut sims = EdgeSims {
            base: vec![0.0; n * cap0],
            upper: Vec::with_capacity(n),
        };
        let mut visited = EpochVisited {
            marks: vec![0; n],
            epoch: 0,
        };
        let mut scratch = Vec::with_capacity(cap0);

        for node in 0..n {
            let u: f64 = 1.0 - rng.random::<f64>();
            let level = ((-u.ln() * ml).floor() as usize).min(MAX_LEVEL);
            index.upper.push(vec![Vec::new(); level]);
            sims.upper.push(vec![Vec::new(); level]);
            if node == 0 {
                index.max_level = level;
                continue;
            }
            let q = store.row(node);
            let mut ep = Cand {
                sim: dot(q, store.row(index.entry as usize)),
                node: index.entry,
            };
            for layer in (level + 1..=index.max_level).rev() {
                ep = index.greedy_descent(rows, q, ep, layer);
            }
            let mut eps = vec![ep];
            for layer in (0..=level.min(index.max_level)).rev() {
                visited.reset();
                let found = index.search_layer(rows, q, &eps, ef_construction, layer, &mut visited, &mut scratch);
                for c in &found[..found.len().min(m)] {
                    index.connect(&mut sims, c.node, Cand { sim: c.sim, node: node as u32 }, layer);
                    index.connect(&mut sims, node as u32, *c, layer);
                }
                eps = found;
            }
            if level > index.max_level {
                index.max_level = level;
                index.entry = node as u32;
            }
        }
        index.relayout(store);
        index
    }

    /// Renumbers nodes breadth-first over layer 0 from the entry point
    /// (unreached nodes follow in row order) and copies the vectors into
    /// that order. Expects node ids equal to store rows.
    fn relayout(&mut self, store: &EmbeddingStore) {
        let n = self.base_len.len();
        const UNSET: u32 = u32::MAX;
        let mut pos = vec![UNSET; n];
        let mut order: Vec<u32> = Vec::with_capacity(n);
        let mut head = 0;
        for root in std::iter::once(self.entry as usize).chain(0..n) {
            if pos[root] != UNSET {
                continue;
            }
            pos[root] = order.len() as u32;
            order.push(root as u32);
            while head < order.len() {
                let cur = order[head];
                head += 1;
                for &nb in self.neighbors(cur, 0) {
                    if pos[nb as usize] == UNSET {
                        pos[nb as usize] = order.len() as u32;
                        order.push(nb);
                    }
                }
            }
        }
        let cap0 = self.cap0();
        let mut base = vec![0u32; n * cap0];
        let mut base_len = vec![0u32; n];
        let mut upper = Vec::with_capacity(n);
        let mut vectors = Vec::with_capacity(n * self.dim);
        for (p, &old) in order.iter().enumerate() {
            let list = self.neighbors(old, 0);
            for (slot, &nb) in base[p * cap0..].iter_mut().zip(list) {
                *slot = pos[nb as usize];
            }
            base_len[p] = list.len() as u32;
            upper.push(
                std::mem::take(&mut self.upper[old as usize])
                    .into_iter()
                    .map(|l| l.into_iter().map(|nb| pos[nb as usize]).collect())
                    .collect(),
            );
            vectors.extend_from_slice(store.row(old as usize));
        }
        self.entry = pos[self.entry as usize];
        self.base = base;
        self.base_len = base_len;
        self.upper = upper;
        self.order = order;
        self.vectors = vectors;
    }

    fn rows(&self) -> Rows<'_> {
        Rows {
            data: &self.vectors,
            dim: self.dim,
        }
    }

    /// Store row of layout position `node`.
    pub fn row_of(&self, node: usize) -> usize {
        self.order[node] as usize
    }

    #[inline]
    fn cap0(&self) -> usize {
        2 * self.m
    }

    #[inline]
    fn neighbors(&self, node: u32, layer: usize) -> &[u32] {
        if layer == 0 {
            let start = node as usize * self.cap0();
            &self.base[start..start + self.base_len[node as usize] as usize]
        } else {
            &self.upper[node as usize][layer - 1]
        }
    }

    /// Adds `new` to `node`'s list on `layer`. A full list keeps its `cap`
    /// most similar entries.
    fn connect(&mut self, sims: &mut EdgeSims, node: u32, new: Cand, layer: usize) {
        let (list, list_sims): (&mut [u32], &mut [f32]) = if layer == 0 {
            let cap = self.cap0();
            let start = node as usize * cap;
            let len = &mut self.base_len[node as usize];
            if (*len as usize) < cap {
                self.base[start + *len as usize] = new.node;
                sims.base[start + *len as usize] = new.sim;
                *len += 1;
                return;
            }
            (&mut self.base[start..start + cap], &mut sims.base[start..start + cap])
        } else {
            let list = &mut self.upper[node as usize][layer - 1];
            let list_sims = &mut sims.upper[node as usize][layer - 1];
            if list.len() < self.m {
                list.push(new.node);
                list_sims.push(new.sim);
                return;
            }
            (list.as_mut_slice(), list_sims.as_mut_slice())
        };
        let at = |i: usize| Cand {
            sim: list_sims[i],
            node: list[i],
        };
        let worst = (0..list.len()).min_by(|&a, &b| at(a).cmp(&at(b))).expect("cap > 0");
        if new > at(worst) {
            list[worst] = new.node;
            list_sims[worst] = new.sim;
        }
    }

    /// Beam search on one layer; returns up to `ef` nodes best-first.
    #[allow(clippy::too_many_arguments)]
    fn search_layer<V: Visited>(
        &self,
        rows: Rows<'_>,
        q: &[f32],
        entries: &[Cand],
        ef: usize,
        layer: usize,
        visited: &mut V,
        fresh: &mut Vec<u32>,
    ) -> Vec<Cand> {
        let mut frontier: BinaryHeap<Cand> = BinaryHeap::new();
        let mut best: BinaryHeap<Reverse<Cand>> = BinaryHeap::with_capacity(ef + 1);
        for &e in entries {
            if visited.insert(e.node) {
                frontier.push(e);
                best.push(Reverse(e));
                if best.len() > ef {
                    best.pop();
                }
            }
        }
        while let Some(c) = frontier.pop() {
            let worst = best.peek().map(|r| r.0.sim).unwrap_or(f32::NEG_INFINITY);
            if best.len() >= ef && c.sim < worst {
                break;
            }
            // Gather first so the row fetches overlap.
            fresh.clear();
            for &nb in self.neighbors(c.node, layer) {
                if visited.insert(nb) {
                    prefetch(rows.row(nb as usize));
                    fresh.push(nb);
                }
            }
            for &nb in fresh.iter() {
                let sim = dot(q, rows.row(nb as usize));
                let worst = best.peek().map(|r| r.0.sim).unwrap_or(f32::NEG_INFINITY);
                if best.len() < ef || sim > worst {
                    let cand = Cand { sim, node: nb };
                    frontier.push(cand);
                    best.push(Reverse(cand));
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        let mut out: Vec<Cand> = best.into_iter().map(|r| r.0).collect();
        out.sort_unstable_by(|a, b| b.cmp(a));
        out
    }

    /// Hill-climbs one layer from `start` until no neighbor improves.
    fn greedy_descent(&self, rows: Rows<'_>, q: &[f32], start: Cand, layer: usize) -> Cand {
        let mut cur = start;
        loop {
            let mut moved = false;
            for &nb in self.neighbors(cur.node, layer) {
                let cand = Cand {
                    sim: dot(q, rows.row(nb as usize)),
                    node: nb,
                };
                if cand > cur {
                    cur = cand;
                    moved = true;
                }
            }
            if !moved {
                return cur;
            }
        }
    }

    pub fn search(&self, store: &EmbeddingStore, q: &[f32], k: usize, ef_search: usize) -> Vec<(u32, f32)> {
        let ef = ef_search.max(k);
        let rows = self.rows();
        let mut ep = Cand {
            sim: dot(q, rows.row(self.entry as usize)),
            node: self.entry,
        };
        for layer in (1..=self.max_level).rev() {
            ep = self.greedy_descent(rows, q, ep, layer);
        }
        let mut visited = BitVisited::new(self.order.len());
        let mut scratch = Vec::with_capacity(self.cap0());
        let found = self.search_layer(rows, q, &[ep], ef, 0, &mut visited, &mut scratch);
        let mut top = TopK::new(k, store);
        for c in found {
            top.push(self.order[c.node as usize], c.sim);
        }
        top.into_sorted()
    }

    pub fn level(&self, node: usize) -> usize {
        self.upper[node].len()
    }

    /// Out-degree of `node` on `layer`; 0 when the node does not reach it.
    pub fn degree(&self, node: usize, layer: usize) -> usize {
        if layer > self.level(node) {
            return 0;
        }
        self.neighbors(node as u32, layer).len()
    }

    pub fn structure_bytes(&self) -> usize {
        let header = std::mem::size_of::<Vec<u32>>();
        let upper: usize = self
            .upper
            .iter()
            .map(|layers| header + layers.iter().map(|l| header + 4 * l.capacity()).sum::<usize>())
            .sum();
        4 * (self.base.len() + self.base_len.len() + self.order.len() + self.vectors.len()) + upper
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.u32(self.m as u32);
        w.u32(self.entry);
        w.u32(self.max_level as u32);
        w.u32(self.base_len.len() as u32);
        w.u32_slice(&self.order);
        for node in 0..self.base_len.len() {
            let base = self.neighbors(node as u32, 0);
            w.u32(base.len() as u32);
            w.u32_slice(base);
            w.u8(self.upper[node].len() as u8);
            for l in &self.upper[node] {
                w.u32(l.len() as u32);
                w.u32_slice(l);
            }
        }
    }

    pub(crate) fn decode(r: &mut Reader<'_>, store: &EmbeddingStore) -> Result<Self, DecodeError> {
        let m = r.u32()? as usize;
        let entry = r.u32()?;
        let max_level = r.u32()? as usize;
        let n = r.u32()? as usize;
        if m < 2 || n != store.len() || n == 0 || entry as usize >= n || max_level > MAX_LEVEL {
            return Err(DecodeError::Invalid("graph header inconsistent with store".into()));
        }
        let order = r.u32_vec(n)?;
        let mut seen = vec![false; n];
        for &row in &order {
            if row as usize >= n || std::mem::replace(&mut seen[row as usize], true) {
                return Err(DecodeError::Invalid("layout order is not a permutation".into()));
            }
        }
        let cap0 = 2 * m;
        let check = |l: &[u32], cap: usize| {
            if l.len() > cap || l.iter().any(|&x| x as usize >= n) {
                Err(DecodeError::Invalid("neighbor list out of range".into()))
            } else {
                Ok(())
            }
        };
        let mut base = vec![0u32; n * cap0];
        let mut base_len = vec![0u32; n];
        let mut upper = Vec::with_capacity(n);
        for node in 0..n {
            let len = r.u32()? as usize;
            if len > cap0 {
                return Err(DecodeError::Invalid("neighbor list out of range".into()));
            }
            let l = r.u32_vec(len)?;
            check(&l, cap0)?;
            base[node * cap0..node * cap0 + len].copy_from_slice(&l);
            base_len[node] = len as u32;
            let nlayers = r.u8()? as usize;
            if nlayers > max_level {
                return Err(DecodeError::Invalid("node level above graph level".into()));
            }
            let mut layers = Vec::with_capacity(nlayers);
            for _ in 0..nlayers {
                let len = r.u32()? as usize;
                if len > m {
                    return Err(DecodeError::Invalid("neighbor list out of range".into()));
                }
                let l = r.u32_vec(len)?;
                check(&l, m)?;
                layers.push(l);
            }
            upper.push(layers);
        }
        if upper[entry as usize].len() != max_level {
            return Err(DecodeError::Invalid("entry point is not on the top layer".into()));
        }
        let vectors = order.iter().flat_map(|&row| store.row(row as usize)).copied().collect();
        Ok(Self {
            m,
            dim: store.dim(),
            entry,
            max_level,
            base,
            base_len,
            upper,
            order,
            vectors,
        })
    }
}
