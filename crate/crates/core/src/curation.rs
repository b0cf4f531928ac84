//! Relationship labels, per-class distance statistics, outlier flags and
//! curator decisions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pairwise::{total_pairs, PairKey, PairScore};

/// Consistency constant turning a MAD into a normal standard deviation.
pub const MAD_TO_SIGMA: f64 = 1.4826;

pub const QUANTILE_LEVELS: [f64; 7] = [0.001, 0.01, 0.25, 0.5, 0.75, 0.99, 0.999];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RelationshipLabel {
    /// Same subject.
    SM,
    /// Monozygotic twins.
    MZ,
    /// Dizygotic twins.
    DZ,
    /// Full siblings.
    FS,
    /// Unrelated.
    UR,
}

impl RelationshipLabel {
    pub const ALL: [RelationshipLabel; 5] = [Self::SM, Self::MZ, Self::DZ, Self::FS, Self::UR];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SM => "SM",
            Self::MZ => "MZ",
            Self::DZ => "DZ",
            Self::FS => "FS",
            Self::UR => "UR",
        }
    }
}

impl fmt::Display for RelationshipLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationshipLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown label {s:?}; expected one of SM, MZ, DZ, FS, UR")))
    }
}

/// One row of the image metadata table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub image_id: String,
    pub subject_id: String,
    pub database: String,
    pub keypoints: u32,
}

/// A twin/sibling relation between two subjects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub subject_a: String,
    pub subject_b: String,
    pub label: RelationshipLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Same,
    Different,
    Unsure,
}

impl FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(Verdict::Same),
            "different" => Ok(Verdict::Different),
            "unsure" => Ok(Verdict::Unsure),
            _ => Err(Error::Config(format!(
                "invalid verdict {s:?}; expected same, different or unsure"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub pair: PairKey,
    pub verdict: Verdict,
    pub curator: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPair {
    pub score: PairScore,
    pub label: RelationshipLabel,
}

/// Every pair with evidence plus every non-UR pair without; the remaining
/// unrelated no-evidence pairs are only counted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledSet {
    pub pairs: Vec<LabeledPair>,
    pub ur_no_evidence: u64,
    /// Pairs with an active same/different decision; never re-flagged.
    pub curated: BTreeSet<PairKey>,
    pub warnings: Vec<String>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        let mut c = x;
        while self.parent[c] != r {
            let next = self.parent[c];
            self.parent[c] = r;
            c = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins, keeps group ids deterministic
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Resolves the relationship label of any image pair from metadata,
/// relations and curator decisions.
pub struct Labeler<'a> {
    images: &'a [ImageMeta],
    /// Subject group per image (merged by "same" decisions).
    group: Vec<usize>,
    /// Original subject index per image, for relation lookup.
    subject: Vec<usize>,
    relations: HashMap<(usize, usize), RelationshipLabel>,
    forced_apart: BTreeSet<PairKey>,
    curated: BTreeSet<PairKey>,
    warnings: Vec<String>,
}

impl<'a> Labeler<'a> {
    pub fn new(images: &'a [ImageMeta], relations: &[Relation]) -> Labeler<'a> {
        let mut subject_ix: BTreeMap<&str, usize> = BTreeMap::new();
        let mut subject_dbs: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        let subject: Vec<usize> = images
            .iter()
            .map(|m| {
                subject_dbs.entry(&m.subject_id).or_default().insert(&m.database);
                let n = subject_ix.len();
                *subject_ix.entry(&m.subject_id).or_insert(n)
            })
            .collect();
        let warnings = subject_dbs
            .iter()
            .filter(|(_, dbs)| dbs.len() > 1)
            .map(|(s, dbs)| {
                format!(
                    "subject id {s:?} occurs in several databases ({}); treated as one subject",
                    dbs.iter().cloned().collect::<Vec<_>>().join(", ")
                )
            })
            .collect();
        let mut rel = HashMap::new();
        for r in relations {
            if let (Some(&a), Some(&b)) = (
                subject_ix.get(r.subject_a.as_str()),
                subject_ix.get(r.subject_b.as_str()),
            ) {
                if a != b && r.label != RelationshipLabel::SM {
                    rel.insert((a.min(b), a.max(b)), r.label);
                }
            }
        }
        Labeler {
            images,
            group: subject.clone(),
            subject,
            relations: rel,
            forced_apart: BTreeSet::new(),
            curated: BTreeSet::new(),
            warnings,
        }
    }

    /// Applies the latest decision per pair: `same` merges the subject
    /// groups of both images, `different` forces that pair apart.
    pub fn with_decisions(mut self, decisions: &[Decision]) -> Result<Labeler<'a>> {
        let n = self.images.len() as u32;
        let mut latest: BTreeMap<PairKey, Verdict> = BTreeMap::new();
        for d in decisions {
            if d.pair.b >= n || d.pair.a >= d.pair.b {
                return Err(Error::Consistency(format!(
                    "decision references unknown pair ({}, {})",
                    d.pair.a, d.pair.b
                )));
            }
            latest.insert(d.pair, d.verdict);
        }
        let mut uf = UnionFind::new(self.images.len().max(1) + self.group.iter().copied().max().unwrap_or(0));
        for (&pair, &v) in &latest {
            if v == Verdict::Same {
                uf.union(self.group[pair.a as usize], self.group[pair.b as usize]);
            }
        }
        self.group = self.group.iter().map(|&g| uf.find(g)).collect();
        for (&pair, &v) in &latest {
            match v {
                Verdict::Different => {
                    self.forced_apart.insert(pair);
                    self.curated.insert(pair);
                }
                Verdict::Same => {
                    self.curated.insert(pair);
                }
                Verdict::Unsure => {}
            }
        }
        Ok(self)
    }

    fn related(&self, a: usize, b: usize) -> RelationshipLabel {
        if self.images[a].database != self.images[b].database {
            return RelationshipLabel::UR;
        }
        let (sa, sb) = (self.subject[a], self.subject[b]);
        self.relations
            .get(&(sa.min(sb), sa.max(sb)))
            .copied()
            .unwrap_or(RelationshipLabel::UR)
    }

    pub fn label(&self, pair: PairKey) -> RelationshipLabel {
        let (a, b) = (pair.a as usize, pair.b as usize);
        if self.group[a] == self.group[b] && !self.forced_apart.contains(&pair) {
            RelationshipLabel::SM
        } else {
            self.related(a, b)
        }
    }

    /// Every pair whose label is not UR.
    fn non_ur_pairs(&self) -> BTreeSet<PairKey> {
        let mut by_group: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        let mut by_subject: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        for i in 0..self.images.len() {
            by_group.entry(self.group[i]).or_default().push(i as u32);
            by_subject.entry(self.subject[i]).or_default().push(i as u32);
        }
        let mut out = BTreeSet::new();
        for members in by_group.values() {
            for (i, &a) in members.iter().enumerate() {
                for &b in &members[i + 1..] {
                    out.insert(PairKey { a, b });
                }
            }
        }
        let empty = Vec::new();
        for &(sa, sb) in self.relations.keys() {
            for &a in by_subject.get(&sa).unwrap_or(&empty) {
                for &b in by_subject.get(&sb).unwrap_or(&empty) {
                    out.insert(PairKey::new(a, b).expect("distinct subjects"));
                }
            }
        }
        out.retain(|&p| self.label(p) != RelationshipLabel::UR);
        out
    }

    /// Labels `scores` and adds zero-evidence entries for every other
    /// non-UR pair.
    pub fn label_scores(&self, scores: &[PairScore]) -> Result<LabeledSet> {
        let n = self.images.len() as u32;
        let mut seen = BTreeSet::new();
        let mut pairs = Vec::with_capacity(scores.len());
        for s in scores {
            if s.key.b >= n {
                return Err(Error::Consistency(format!(
                    "pair ({}, {}) references image index {} but metadata lists {n} images",
                    s.key.a, s.key.b, s.key.b
                )));
            }
            seen.insert(s.key);
            pairs.push(LabeledPair {
                score: *s,
                label: self.label(s.key),
            });
        }
        for key in self.non_ur_pairs() {
            if seen.insert(key) {
                pairs.push(LabeledPair {
                    score: no_evidence(key, self.images),
                    label: self.label(key),
                });
            }
        }
        pairs.sort_by_key(|p| p.score.key);
        let ur_no_evidence = total_pairs(n as u64) - pairs.len() as u64;
        Ok(LabeledSet {
            pairs,
            ur_no_evidence,
            curated: self.curated.clone(),
            warnings: self.warnings.clone(),
        })
    }
}

fn no_evidence(key: PairKey, images: &[ImageMeta]) -> PairScore {
    let union_ = images[key.a as usize].keypoints as f64 + images[key.b as usize].keypoints as f64;
    PairScore {
        key,
        c_ab: 0,
        c_ba: 0,
        intersection: 0.0,
        union_,
        jaccard: 0.0,
        distance: f64::INFINITY,
    }
}

/// Labels scored pairs from metadata alone: same subject id is SM, a
/// relation-table entry within one database gives its label, everything
/// else (including every cross-database pair) is UR.
pub fn assign_labels(images: &[ImageMeta], relations: &[Relation], scores: &[PairScore]) -> Result<LabeledSet> {
    Labeler::new(images, relations).label_scores(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    #[serde(flatten)]
    pub pair: PairKey,
    pub from: RelationshipLabel,
    pub to: RelationshipLabel,
    /// The verdict on this exact pair, if any; `None` when the label changed
    /// through a subject-group merge.
    pub verdict: Option<Verdict>,
}

/// Relabels with curator decisions and reports every pair whose label
/// changed relative to `labeled`.
pub fn apply_decisions(
    images: &[ImageMeta],
    relations: &[Relation],
    scores: &[PairScore],
    labeled: &LabeledSet,
    decisions: &[Decision],
) -> Result<(LabeledSet, Vec<AuditEntry>)> {
    let relabeled = Labeler::new(images, relations)
        .with_decisions(decisions)?
        .label_scores(scores)?;
    let mut verdicts: BTreeMap<PairKey, Verdict> = BTreeMap::new();
    for d in decisions {
        verdicts.insert(d.pair, d.verdict);
    }
    let before: BTreeMap<PairKey, RelationshipLabel> =
        labeled.pairs.iter().map(|p| (p.score.key, p.label)).collect();
    let after: BTreeMap<PairKey, RelationshipLabel> =
        relabeled.pairs.iter().map(|p| (p.score.key, p.label)).collect();
    let keys: BTreeSet<PairKey> = before.keys().chain(after.keys()).copied().collect();
    let audit = keys
        .into_iter()
        .filter_map(|k| {
            let from = before.get(&k).copied().unwrap_or(RelationshipLabel::UR);
            let to = after.get(&k).copied().unwrap_or(RelationshipLabel::UR);
            (from != to).then(|| AuditEntry {
                pair: k,
                from,
                to,
                verdict: verdicts.get(&k).copied(),
            })
        })
        .collect();
    Ok((relabeled, audit))
}

/// Linear interpolation of the empirical CDF (numpy's default) on sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantilePoint {
    pub level: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub label: RelationshipLabel,
    pub n_finite: u64,
    pub n_no_evidence: u64,
    pub median: Option<f64>,
    /// Unscaled median absolute deviation.
    pub mad: Option<f64>,
    pub quantiles: Option<Vec<QuantilePoint>>,
    /// Median of the total match count `c_ab + c_ba` over finite pairs.
    pub median_matches: Option<f64>,
}

impl ClassStats {
    pub fn quantile(&self, level: f64) -> Option<f64> {
        self.quantiles
            .as_ref()?
            .iter()
            .find(|q| (q.level - level).abs() < 1e-12)
            .map(|q| q.value)
    }

    /// Robust standard-deviation estimate: 1.4826 MAD, or 1.4826 times half
    /// the IQR when the MAD is zero. `None` when both vanish.
    ///
    /// The estimate is floored at the counting resolution of the class:
    /// a distance built from `c` matches moves by about `1/sqrt(c)` when the
    /// count fluctuates by one standard deviation, so a class whose typical
    /// pair has a single chance match cannot call a second match a
    /// five-sigma event.
    pub fn robust_scale(&self) -> Option<f64> {
        let mad = self.mad?;
        let spread = if mad > 0.0 {
            mad
        } else {
            (self.quantile(0.75)? - self.quantile(0.25)?) / 2.0
        };
        if spread <= 0.0 {
            return None;
        }
        let floor = self.median_matches.filter(|&c| c > 0.0).map_or(0.0, |c| c.sqrt().recip());
        Some((MAD_TO_SIGMA * spread).max(floor))
    }
}

fn stats_for(label: RelationshipLabel, mut finite: Vec<f64>, mut matches: Vec<f64>, no_evidence: u64) -> ClassStats {
    finite.sort_by(f64::total_cmp);
    matches.sort_by(f64::total_cmp);
    let median = quantile_sorted(&finite, 0.5);
    let mad = median.map(|m| {
        let mut dev: Vec<f64> = finite.iter().map(|d| (d - m).abs()).collect();
        dev.sort_by(f64::total_cmp);
        quantile_sorted(&dev, 0.5).unwrap()
    });
    let quantiles = (!finite.is_empty()).then(|| {
        QUANTILE_LEVELS
            .iter()
            .map(|&level| QuantilePoint {
                level,
                value: quantile_sorted(&finite, level).unwrap(),
            })
            .collect()
    });
    ClassStats {
        label,
        n_finite: finite.len() as u64,
        n_no_evidence: no_evidence,
        median,
        mad,
        quantiles,
        median_matches: quantile_sorted(&matches, 0.5),
    }
}

/// Per-label statistics over finite distances; classes without any pair
/// are omitted.
pub fn class_stats(labeled: &LabeledSet) -> BTreeMap<RelationshipLabel, ClassStats> {
    let mut finite: BTreeMap<RelationshipLabel, Vec<f64>> = BTreeMap::new();
    let mut matches: BTreeMap<RelationshipLabel, Vec<f64>> = BTreeMap::new();
    let mut missing: BTreeMap<RelationshipLabel, u64> = BTreeMap::new();
    for p in &labeled.pairs {
        if p.score.distance.is_finite() {
            finite.entry(p.label).or_default().push(p.score.distance);
            matches.entry(p.label).or_default().push(p.score.c_ab as f64 + p.score.c_ba as f64);
        } else {
            *missing.entry(p.label).or_default() += 1;
        }
    }
    *missing.entry(RelationshipLabel::UR).or_default() += labeled.ur_no_evidence;
    RelationshipLabel::ALL
        .into_iter()
        .filter_map(|l| {
            let f = finite.remove(&l).unwrap_or_default();
            let c = matches.remove(&l).unwrap_or_default();
            let m = missing.get(&l).copied().unwrap_or(0);
            (!f.is_empty() || m > 0).then(|| (l, stats_for(l, f, c, m)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TooSimilar,
    TooDissimilar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suggestion {
    SameSubject,
    DifferentSubject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    #[serde(flatten)]
    pub pair: PairKey,
    pub label: RelationshipLabel,
    pub distance: f64,
    pub direction: Direction,
    /// Robust z-score magnitude (at least the threshold).
    pub severity: f64,
    pub suggested: Suggestion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlagParams {
    pub z_threshold: f64,
    /// Any non-SM pair at or below this quantile of the SM distances is
    /// flagged as a duplicate candidate.
    pub sm_quantile: f64,
    /// Classes with fewer finite distances are not z-flagged.
    pub min_class_size: u64,
}

impl Default for FlagParams {
    fn default() -> Self {
        FlagParams {
            z_threshold: 5.0,
            sm_quantile: 0.999,
            min_class_size: 20,
        }
    }
}

impl FlagParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.z_threshold > 0.0) {
            return Err(Error::Config("z_threshold must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.sm_quantile) {
            return Err(Error::Config("sm_quantile must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Flags finite-distance pairs whose distance is anomalous for their label:
/// SM pairs only when too far, every other label only when too close.
/// Sorted by severity (descending), then pair.
pub fn flag_outliers(
    labeled: &LabeledSet,
    stats: &BTreeMap<RelationshipLabel, ClassStats>,
    params: &FlagParams,
) -> Vec<Flag> {
    let mut sm: Vec<f64> = labeled
        .pairs
        .iter()
        .filter(|p| p.label == RelationshipLabel::SM && p.score.distance.is_finite())
        .map(|p| p.score.distance)
        .collect();
    sm.sort_by(f64::total_cmp);
    let duplicate_cut = quantile_sorted(&sm, params.sm_quantile);

    let mut flags = Vec::new();
    for p in &labeled.pairs {
        let d = p.score.distance;
        if !d.is_finite() || labeled.curated.contains(&p.score.key) {
            continue;
        }
        let Some(st) = stats.get(&p.label) else { continue };
        let z = if st.n_finite >= params.min_class_size {
            st.robust_scale().map(|s| (d - st.median.unwrap()) / s)
        } else {
            None
        };
        let is_sm = p.label == RelationshipLabel::SM;
        let z_flag = z.is_some_and(|z| {
            z.abs() >= params.z_threshold && if is_sm { z > 0.0 } else { z < 0.0 }
        });
        let below_median = st.median.map_or(true, |m| d < m);
        let dup_flag = !is_sm && below_median && duplicate_cut.is_some_and(|c| d <= c);
        if !(z_flag || dup_flag) {
            continue;
        }
        let (direction, suggested) = if is_sm {
            (Direction::TooDissimilar, Suggestion::DifferentSubject)
        } else {
            (Direction::TooSimilar, Suggestion::SameSubject)
        };
        let severity = z.map_or(params.z_threshold, |z| z.abs().max(params.z_threshold));
        flags.push(Flag {
            pair: p.score.key,
            label: p.label,
            distance: d,
            direction,
            severity,
            suggested,
        });
    }
    flags.sort_by(|a, b| b.severity.total_cmp(&a.severity).then(a.pair.cmp(&b.pair)));
    flags
}
