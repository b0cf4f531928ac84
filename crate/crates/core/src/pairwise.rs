//! Cross-image match accumulation and log-Jaccard pair scores.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::Signature;
use crate::error::{Error, Result};
use crate::knn::{KdIndex, Neighbor};

/// Unordered image pair, stored with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairKey {
    pub a: u32,
    pub b: u32,
}

impl PairKey {
    pub fn new(x: u32, y: u32) -> Result<PairKey> {
        match x.cmp(&y) {
            std::cmp::Ordering::Less => Ok(PairKey { a: x, b: y }),
            std::cmp::Ordering::Greater => Ok(PairKey { a: y, b: x }),
            std::cmp::Ordering::Equal => Err(Error::Consistency(format!("self pair ({x}, {x})"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    #[serde(flatten)]
    pub key: PairKey,
    /// Matches credited from image `a` to image `b`.
    pub c_ab: u32,
    pub c_ba: u32,
    pub intersection: f64,
    #[serde(rename = "union")]
    pub union_: f64,
    pub jaccard: f64,
    /// `-ln(jaccard)`; `f64::INFINITY` when the images share no matches.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchParams {
    /// Nearest/second-nearest L2 distance ratio below which a match counts.
    pub ratio: f64,
    /// Minimum total credits (both directions) for a pair to be reported.
    pub min_matches: u32,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            ratio: 0.9,
            min_matches: 1,
        }
    }
}

impl MatchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config(format!("ratio {} not in (0, 1]", self.ratio)));
        }
        Ok(())
    }
}

/// Total candidate pairs among `n` images.
pub fn total_pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Sparse directed match counts, keyed by canonical pair.
pub type MatchCounts = BTreeMap<PairKey, (u32, u32)>;

/// Ratio test on one query's neighbour list. The second neighbour is the
/// nearest one owned by a different image than the first, when present.
fn accept(neighbors: &[Neighbor], ratio: f64) -> Option<u32> {
    let n1 = neighbors.first()?;
    let n2 = neighbors[1..]
        .iter()
        .find(|n| n.record.image_ref != n1.record.image_ref)
        .or_else(|| neighbors.get(1));
    let ok = match n2 {
        None => true,
        Some(_) if n1.distance == 0 => true,
        Some(n2) => (n1.distance as f64) < ratio * ratio * n2.distance as f64,
    };
    ok.then_some(n1.record.image_ref)
}

fn check_index(signatures: &[Signature], ix: &KdIndex) -> Result<()> {
    let total: usize = signatures.iter().map(Signature::len).sum();
    if total != ix.len() {
        return Err(Error::Consistency(format!(
            "index holds {} descriptors, signatures have {total}",
            ix.len()
        )));
    }
    for r in ix.records() {
        let ok = signatures
            .get(r.image_ref as usize)
            .and_then(|s| s.keypoints.get(r.kp_ref as usize))
            .is_some_and(|k| k.descr == r.vec);
        if !ok {
            return Err(Error::Consistency(format!(
                "index record ({}, {}) does not match the signatures",
                r.image_ref, r.kp_ref
            )));
        }
    }
    Ok(())
}

/// Queries every keypoint of every image against the pooled index (own
/// image excluded) and credits ratio-test survivors to the owning pair.
pub fn accumulate_matches(signatures: &[Signature], ix: &KdIndex, mp: &MatchParams) -> Result<MatchCounts> {
    check_index(signatures, ix)?;
    let k = ix.params().k.max(2);
    let per_image: Vec<Vec<(u32, u32)>> = signatures
        .par_iter()
        .enumerate()
        .map(|(a, sig)| {
            let a = a as u32;
            let mut credits: BTreeMap<u32, u32> = BTreeMap::new();
            for kp in &sig.keypoints {
                let res = ix.query(&kp.descr, k, Some(a));
                if let Some(b) = accept(&res, mp.ratio) {
                    *credits.entry(b).or_default() += 1;
                }
            }
            credits.into_iter().collect()
        })
        .collect();

    let mut out = MatchCounts::new();
    for (a, credits) in per_image.into_iter().enumerate() {
        for (b, c) in credits {
            let key = PairKey::new(a as u32, b)?;
            let slot = out.entry(key).or_default();
            if key.a == a as u32 {
                slot.0 += c;
            } else {
                slot.1 += c;
            }
        }
    }
    Ok(out)
}

/// Jaccard overlap from directed counts: the intersection is the mean of the
/// two directions, clamped to the smaller set.
pub fn score_pair(key: PairKey, size_a: usize, size_b: usize, c_ab: u32, c_ba: u32) -> Result<PairScore> {
    if size_a == 0 || size_b == 0 {
        return Err(Error::UndefinedScore(format!(
            "pair ({}, {}) has an empty signature",
            key.a, key.b
        )));
    }
    let (sa, sb) = (size_a as f64, size_b as f64);
    let intersection = ((c_ab as f64 + c_ba as f64) / 2.0).min(sa.min(sb));
    let union_ = sa + sb - intersection;
    let jaccard = intersection / union_;
    let distance = if jaccard > 0.0 {
        0.0 - jaccard.ln()
    } else {
        f64::INFINITY
    };
    Ok(PairScore {
        key,
        c_ab,
        c_ba,
        intersection,
        union_,
        jaccard,
        distance,
    })
}

/// Scores every pair with at least `min_matches` credits, ordered by key.
/// Pairs that were never co-retrieved are implicitly at J = 0.
pub fn score_dataset(signatures: &[Signature], ix: &KdIndex, mp: &MatchParams) -> Result<Vec<PairScore>> {
    mp.validate()?;
    let counts = accumulate_matches(signatures, ix, mp)?;
    counts
        .into_iter()
        .filter(|(_, (ab, ba))| ab + ba >= mp.min_matches.max(1))
        .map(|(key, (ab, ba))| {
            score_pair(
                key,
                signatures[key.a as usize].len(),
                signatures[key.b as usize].len(),
                ab,
                ba,
            )
        })
        .collect()
}
