//! Pooled KD-tree over every descriptor of a dataset, searched best-bin-first
//! under a leaf-visit budget, plus the exact linear-scan oracle.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::descriptor::{Signature, DESCRIPTOR_LEN};
use crate::error::{Error, Result};

pub type Descriptor = [u8; DESCRIPTOR_LEN];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DescriptorRecord {
    pub vec: Descriptor,
    pub image_ref: u32,
    pub kp_ref: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexParams {
    pub leaf_size: usize,
    /// Maximum number of leaves visited per query.
    pub checks: usize,
    /// Neighbours requested per query (after own-image exclusion).
    pub k: usize,
}

impl Default for IndexParams {
    fn default() -> Self {
        IndexParams {
            leaf_size: 16,
            checks: 128,
            k: 2,
        }
    }
}

impl IndexParams {
    pub fn validate(&self) -> Result<()> {
        if self.leaf_size < 1 || self.checks < 1 || self.k < 1 {
            return Err(Error::Config("leaf_size, checks and k must all be >= 1".into()));
        }
        Ok(())
    }
}

/// Exact squared L2 distance between rank vectors.
#[inline]
pub fn squared_distance(a: &Descriptor, b: &Descriptor) -> u32 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as i32 - y as i32;
            (d * d) as u32
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub record: DescriptorRecord,
    pub distance: u32,
}

impl Neighbor {
    fn key(&self) -> (u32, u32, u32) {
        (self.distance, self.record.image_ref, self.record.kp_ref)
    }
}

#[derive(Debug, Clone, Copy)]
enum Node {
    Leaf {
        start: u32,
        end: u32,
    },
    Split {
        dim: u8,
        /// Largest value on the left side, smallest on the right.
        left_max: u8,
        right_min: u8,
        left: u32,
        right: u32,
    },
}

/// Per-query work counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueryStats {
    pub leaves_visited: usize,
    pub distance_evals: usize,
}

#[derive(Debug, Clone)]
pub struct KdIndex {
    records: Vec<DescriptorRecord>,
    nodes: Vec<Node>,
    params: IndexParams,
    depth: usize,
    leaves: usize,
}

/// Records of `signatures` in image/keypoint order.
pub fn records_from_signatures(signatures: &[Signature]) -> Vec<DescriptorRecord> {
    signatures
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.keypoints.iter().enumerate().map(move |(k, kp)| DescriptorRecord {
                vec: kp.descr,
                image_ref: i as u32,
                kp_ref: k as u32,
            })
        })
        .collect()
}

impl KdIndex {
    pub fn build(records: Vec<DescriptorRecord>, params: IndexParams) -> KdIndex {
        let mut ix = KdIndex {
            records,
            nodes: Vec::new(),
            params,
            depth: 0,
            leaves: 0,
        };
        if !ix.records.is_empty() {
            let n = ix.records.len();
            ix.build_node(0, n, 1);
        }
        ix
    }

    pub fn from_signatures(signatures: &[Signature], params: IndexParams) -> KdIndex {
        KdIndex::build(records_from_signatures(signatures), params)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[DescriptorRecord] {
        &self.records
    }

    pub fn params(&self) -> &IndexParams {
        &self.params
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves
    }

    fn build_node(&mut self, start: usize, end: usize, depth: usize) -> u32 {
        self.depth = self.depth.max(depth);
        let id = self.nodes.len() as u32;
        let n = end - start;
        if n <= self.params.leaf_size.max(1) {
            self.nodes.push(Node::Leaf {
                start: start as u32,
                end: end as u32,
            });
            self.leaves += 1;
            return id;
        }
        self.nodes.push(Node::Leaf { start: 0, end: 0 });

        let slice = &mut self.records[start..end];
        // exact integer variance * n^2 per dimension; lowest dim wins ties
        let mut best = (0usize, 0u64);
        for d in 0..DESCRIPTOR_LEN {
            let (mut s, mut s2) = (0u64, 0u64);
            for r in slice.iter() {
                let x = r.vec[d] as u64;
                s += x;
                s2 += x * x;
            }
            let var = n as u64 * s2 - s * s;
            if var > best.1 {
                best = (d, var);
            }
        }
        let dim = best.0;
        slice.sort_by_key(|r| (r.vec[dim], r.image_ref, r.kp_ref));

        let mid = n / 2;
        let cut = if best.1 == 0 {
            mid
        } else {
            // left takes values <= the median; if that swallows everything,
            // split below the median instead
            let median = slice[(n - 1) / 2].vec[dim];
            let le = slice.partition_point(|r| r.vec[dim] <= median);
            if le < n {
                le
            } else {
                slice.partition_point(|r| r.vec[dim] < median)
            }
        };
        let left_max = slice[cut - 1].vec[dim];
        let right_min = slice[cut].vec[dim];

        let left = self.build_node(start, start + cut, depth + 1);
        let right = self.build_node(start + cut, end, depth + 1);
        self.nodes[id as usize] = Node::Split {
            dim: dim as u8,
            left_max,
            right_min,
            left,
            right,
        };
        id
    }

    /// Approximate k nearest neighbours of `q`, ascending by distance,
    /// skipping records of `exclude_image`.
    pub fn query(&self, q: &Descriptor, k: usize, exclude_image: Option<u32>) -> Vec<Neighbor> {
        self.query_with_stats(q, k, exclude_image).0
    }

    pub fn query_with_stats(
        &self,
        q: &Descriptor,
        k: usize,
        exclude_image: Option<u32>,
    ) -> (Vec<Neighbor>, QueryStats) {
        let mut stats = QueryStats::default();
        if self.nodes.is_empty() || k == 0 {
            return (Vec::new(), stats);
        }
        // max-heap on (distance, image, kp) holding the current best k
        let mut best: BinaryHeap<(u32, u32, u32, u32)> = BinaryHeap::with_capacity(k + 1);
        let mut branches: BinaryHeap<Reverse<(u32, u32)>> = BinaryHeap::new();
        branches.push(Reverse((0, 0)));

        'search: while let Some(Reverse((bound, mut node))) = branches.pop() {
            if best.len() == k && bound > best.peek().unwrap().0 {
                continue;
            }
            loop {
                match self.nodes[node as usize] {
                    Node::Leaf { start, end } => {
                        if stats.leaves_visited >= self.params.checks {
                            break 'search;
                        }
                        stats.leaves_visited += 1;
                        for pos in start..end {
                            let r = &self.records[pos as usize];
                            if Some(r.image_ref) == exclude_image {
                                continue;
                            }
                            stats.distance_evals += 1;
                            let key = (squared_distance(q, &r.vec), r.image_ref, r.kp_ref, pos);
                            if best.len() < k {
                                best.push(key);
                            } else if key < *best.peek().unwrap() {
                                best.pop();
                                best.push(key);
                            }
                        }
                        break;
                    }
                    Node::Split {
                        dim,
                        left_max,
                        right_min,
                        left,
                        right,
                    } => {
                        let x = q[dim as usize] as i32;
                        let (near, far, gap) = if x <= left_max as i32 {
                            (left, right, (right_min as i32 - x).max(0))
                        } else {
                            (right, left, x - left_max as i32)
                        };
                        let far_bound = bound.max((gap * gap) as u32);
                        if best.len() < k || far_bound <= best.peek().unwrap().0 {
                            branches.push(Reverse((far_bound, far)));
                        }
                        node = near;
                    }
                }
            }
        }

        let mut out = best.into_vec();
        out.sort_unstable();
        let neighbors = out
            .into_iter()
            .map(|(d, _, _, pos)| Neighbor {
                record: self.records[pos as usize],
                distance: d,
            })
            .collect();
        (neighbors, stats)
    }
}

/// Exact linear scan; ties broken by (image_ref, kp_ref).
pub fn brute_force_query(
    records: &[DescriptorRecord],
    q: &Descriptor,
    k: usize,
    exclude_image: Option<u32>,
) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = records
        .iter()
        .filter(|r| Some(r.image_ref) != exclude_image)
        .map(|r| Neighbor {
            record: *r,
            distance: squared_distance(q, &r.vec),
        })
        .collect();
    all.sort_by(|a, b| a.key().cmp(&b.key()));
    all.truncate(k);
    all
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}
