//! Exact KD-tree over fixed-dimension `f64` keys.
//!
//! Static: built once over a set of keys, queried many times. Queries take an
//! eligibility bound (`index < limit`) so a tree built over a prefix of the
//! database can serve queries that must ignore its most recent entries.
//! Results are the `k` smallest `(squared distance, index)` pairs, which makes
//! ties resolve to the smaller index and keeps output identical to a sorted
//! linear scan.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    /// Flattened keys, `dim` values each, in insertion order.
    keys: Vec<f64>,
    /// Key indices permuted so every leaf owns a contiguous range.
    order: Vec<usize>,
    nodes: Vec<Node>,
    /// Smallest key index under each node, for pruning by eligibility.
    min_index: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Squared Euclidean distance, summed in dimension order.
#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KdTree {
    /// Builds over `keys` (each of length `dim`); index `i` refers to
    /// `keys[i]`.
    pub fn build(dim: usize, keys: Vec<f64>) -> Self {
        assert!(dim > 0 && keys.len().is_multiple_of(dim));
        let n = keys.len() / dim;
        let mut tree = KdTree {
            dim,
            keys,
            order: (0..n).collect(),
            nodes: Vec::new(),
            min_index: Vec::new(),
        };
        if n > 0 {
            tree.build_node(0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn key(&self, index: usize) -> &[f64] {
        &self.keys[index * self.dim..(index + 1) * self.dim]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        let min_index = self.order[start..end].iter().copied().min().unwrap();
        self.nodes.push(Node::Leaf { start, end });
        self.min_index.push(min_index);
        if end - start <= LEAF_SIZE {
            return id;
        }

        // split on the dimension with the widest spread
        let (dim, spread) = (0..self.dim)
            .map(|d| {
                let (lo, hi) = self.order[start..end].iter().fold(
                    (f64::INFINITY, f64::NEG_INFINITY),
                    |(lo, hi), &i| {
                        let v = self.keys[i * self.dim + d];
                        (lo.min(v), hi.max(v))
                    },
                );
                (d, hi - lo)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        if !(spread > 0.0) {
            return id;
        }

        let mid = start + (end - start) / 2;
        let keys = &self.keys;
        let stride = self.dim;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            keys[a * stride + dim].total_cmp(&keys[b * stride + dim])
        });
        let value = self.keys[self.order[mid] * self.dim + dim];
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            dim,
            value,
            left,
            right,
        };
        id
    }

    /// The `k` nearest keys among indices `< limit`, nearest first, as
    /// `(index, squared distance)`.
    pub fn knn(&self, query: &[f64], k: usize, limit: usize) -> Vec<(usize, f64)> {
        if k == 0 || self.is_empty() || limit == 0 {
            return Vec::new();
        }
        assert_eq!(query.len(), self.dim);
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, limit, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.dist2)).collect()
    }

    fn search(
        &self,
        node: usize,
        query: &[f64],
        k: usize,
        limit: usize,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        if self.min_index[node] >= limit {
            return;
        }
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &index in &self.order[start..end] {
                    if index >= limit {
                        continue;
                    }
                    let cand = Candidate {
                        dist2: squared_distance(query, self.key(index)),
                        index,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[dim] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, query, k, limit, heap);
                // equal-distance keys on the far side may still win on index
                if heap.len() < k || diff * diff <= heap.peek().unwrap().dist2 {
                    self.search(far, query, k, limit, heap);
                }
            }
        }
    }
}
