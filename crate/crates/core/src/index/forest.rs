//! Random-projection tree forest.
//!
//! Each tree recursively splits its point set by the hyperplane that
//! perpendicularly bisects two distinct, randomly chosen points, until a node
//! holds at most `leaf_size` rows. A query walks all trees best-first by
//! hyperplane margin, collects leaf contents until the candidate budget is
//! met, then re-ranks the deduplicated union exactly.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::topk::TopK;
use crate::catalog::EmbeddingStore;
use crate::codec::{DecodeError, Reader, Writer};
use crate::vecmath::dot;

pub const DEFAULT_LEAF_SIZE: usize = 64;
const SPLIT_ATTEMPTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Node {
    /// `normal` indexes a `dim`-sized block of `ForestIndex::normals`.
    /// Points with `x·n − offset ≥ 0` descend `left`.
    Split {
        normal: u32,
        offset: f32,
        left: u32,
        right: u32,
    },
    Leaf {
        start: u32,
        len: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestIndex {
    pub(crate) leaf_size: usize,
    pub(crate) roots: Vec<u32>,
    pub(crate) nodes: Vec<Node>,
    pub(crate) normals: Vec<f32>,
    pub(crate) leaf_items: Vec<u32>,
}

#[derive(PartialEq)]
struct Pending {
    priority: f32,
    node: u32,
}

impl Eq for Pending {}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl ForestIndex {
    pub fn build(store: &EmbeddingStore, n_trees: usize, leaf_size: usize, seed: u64) -> Self {
        let mut forest = Self {
            leaf_size,
            roots: Vec::with_capacity(n_trees),
            nodes: Vec::new(),
            normals: Vec::new(),
            leaf_items: Vec::new(),
        };
        let all: Vec<u32> = (0..store.len() as u32).collect();
        for t in 0..n_trees {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let root = forest.build_node(store, all.clone(), &mut rng);
            forest.roots.push(root);
        }
        forest
    }

    fn push_leaf(&mut self, rows: &[u32]) -> u32 {
        let start = self.leaf_items.len() as u32;
        self.leaf_items.extend_from_slice(rows);
        self.nodes.push(Node::Leaf {
            start,
            len: rows.len() as u32,
        });
        (self.nodes.len() - 1) as u32
    }

    /// Finds a bisecting hyperplane that leaves both sides non-empty.
    fn choose_split(store: &EmbeddingStore, rows: &[u32], rng: &mut ChaCha8Rng) -> Option<(Vec<f32>, f32, Vec<u32>, Vec<u32>)> {
        let dim = store.dim();
        for _ in 0..SPLIT_ATTEMPTS {
            let i = rng.random_range(0..rows.len());
            let mut j = rng.random_range(0..rows.len() - 1);
            if j >= i {
                j += 1;
            }
            let (a, b) = (store.row(rows[i] as usize), store.row(rows[j] as usize));
            let mut normal: Vec<f32> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let len = dot(&normal, &normal).sqrt();
            if len <= f32::EPSILON {
                continue;
            }
            normal.iter_mut().for_each(|x| *x /= len);
            let mid: Vec<f32> = (0..dim).map(|d| 0.5 * (a[d] + b[d])).collect();
            let offset = dot(&normal, &mid);
            let (left, right): (Vec<u32>, Vec<u32>) = rows
                .iter()
                .partition(|&&r| dot(store.row(r as usize), &normal) - offset >= 0.0);
            if !left.is_empty() && !right.is_empty() {
                return Some((normal, offset, left, right));
            }
        }
        None
    }

    fn build_node(&mut self, store: &EmbeddingStore, rows: Vec<u32>, rng: &mut ChaCha8Rng) -> u32 {
        if rows.len() <= self.leaf_size {
            return self.push_leaf(&rows);
        }
        let Some((normal, offset, left, right)) = Self::choose_split(store, &rows, rng) else {
            // All sampled pairs coincide: the node cannot be split further.
            return self.push_leaf(&rows);
        };
        drop(rows);
        let normal_idx = (self.normals.len() / store.dim()) as u32;
        self.normals.extend_from_slice(&normal);
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { start: 0, len: 0 });
        let l = self.build_node(store, left, rng);
        let r = self.build_node(store, right, rng);
        self.nodes[slot] = Node::Split {
            normal: normal_idx,
            offset,
            left: l,
            right: r,
        };
        slot as u32
    }

    pub fn search(&self, store: &EmbeddingStore, q: &[f32], k: usize, search_k: usize) -> Vec<(u32, f32)> {
        let dim = store.dim();
        let budget = search_k.max(k);
        let mut queue: BinaryHeap<Pending> = self
            .roots
            .iter()
            .map(|&node| Pending {
                priority: f32::INFINITY,
                node,
            })
            .collect();
        let mut candidates: Vec<u32> = Vec::with_capacity(budget + self.leaf_size);
        while candidates.len() < budget {
            let Some(Pending { priority, node }) = queue.pop() else {
                break;
            };
            match self.nodes[node as usize] {
                Node::Leaf { start, len } => {
                    candidates.extend_from_slice(&self.leaf_items[start as usize..(start + len) as usize]);
                }
                Node::Split {
                    normal,
                    offset,
                    left,
                    right,
                } => {
                    let n = &self.normals[normal as usize * dim..(normal as usize + 1) * dim];
                    let margin = dot(q, n) - offset;
                    queue.push(Pending {
                        priority: priority.min(margin),
                        node: left,
                    });
                    queue.push(Pending {
                        priority: priority.min(-margin),
                        node: right,
                    });
                }
            }
        }
        candidates.sort_unstable();
        candidates.dedup();
        let mut top = TopK::new(k, store);
        for r in candidates {
            top.push(r, dot(q, store.row(r as usize)));
        }
        top.into_sorted()
    }

    pub fn n_trees(&self) -> usize {
        self.roots.len()
    }

    pub fn structure_bytes(&self) -> usize {
        self.roots.len() * 4 + self.nodes.len() * std::mem::size_of::<Node>() + self.normals.len() * 4 + self.leaf_items.len() * 4
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.u32(self.leaf_size as u32);
        w.u32(self.roots.len() as u32);
        w.u32_slice(&self.roots);
        w.u32(self.nodes.len() as u32);
        for node in &self.nodes {
            match *node {
                Node::Split {
                    normal,
                    offset,
                    left,
                    right,
                } => {
                    w.u8(0);
                    w.u32(normal);
                    w.f32(offset);
                    w.u32(left);
                    w.u32(right);
                }
                Node::Leaf { start, len } => {
                    w.u8(1);
                    w.u32(start);
                    w.u32(len);
                }
            }
        }
        w.u32(self.normals.len() as u32);
        w.f32_slice(&self.normals);
        w.u32(self.leaf_items.len() as u32);
        w.u32_slice(&self.leaf_items);
    }

    pub(crate) fn decode(r: &mut Reader<'_>, store: &EmbeddingStore) -> Result<Self, DecodeError> {
        let leaf_size = r.u32()? as usize;
        let n_roots = r.u32()? as usize;
        let roots = r.u32_vec(n_roots)?;
        let n_nodes = r.u32()? as usize;
        let mut nodes = Vec::with_capacity(n_nodes.min(r.remaining() / 9));
        for _ in 0..n_nodes {
            let node = match r.u8()? {
                0 => Node::Split {
                    normal: r.u32()?,
                    offset: r.f32()?,
                    left: r.u32()?,
                    right: r.u32()?,
                },
                1 => Node::Leaf {
                    start: r.u32()?,
                    len: r.u32()?,
                },
                t => return Err(DecodeError::Invalid(format!("bad node tag {t}"))),
            };
            nodes.push(node);
        }
        let n_normals = r.u32()? as usize;
        let normals = r.f32_vec(n_normals)?;
        let n_items = r.u32()? as usize;
        let leaf_items = r.u32_vec(n_items)?;

        let dim = store.dim();
        let in_range = |i: u32| (i as usize) < nodes.len();
        let valid = roots.iter().all(|&x| in_range(x))
            && n_normals % dim == 0
            && leaf_items.iter().all(|&x| (x as usize) < store.len())
            && nodes.iter().enumerate().all(|(i, node)| match *node {
                // Children always follow their parent, which rules out cycles.
                Node::Split {
                    normal, left, right, ..
                } => {
                    in_range(left)
                        && in_range(right)
                        && left as usize > i
                        && right as usize > i
                        && (normal as usize) < n_normals / dim
                }
                Node::Leaf { start, len } => (start as usize + len as usize) <= leaf_items.len(),
            });
        if !valid {
            return Err(DecodeError::Invalid("forest structure out of range".into()));
        }
        Ok(Self {
            leaf_size,
            roots,
            nodes,
            normals,
            leaf_items,
        })
    }
}
