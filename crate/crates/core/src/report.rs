//! The versioned JSON report: images, labels, finite pair scores, per-class
//! statistics, flags and the configuration that produced them.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::curation::{
    apply_decisions, assign_labels, class_stats, flag_outliers, AuditEntry, ClassStats, Decision, Flag, FlagParams,
    ImageMeta, LabeledSet, Relation, RelationshipLabel,
};
use crate::error::{Error, Result};
use crate::formats::DecisionRecord;
use crate::pairwise::{total_pairs, PairKey, PairScore};

pub const REPORT_FORMAT: &str = "keysig-report";
pub const PIPELINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    /// Base of the logarithm in `distance = -log(jaccard)`.
    pub log_base: String,
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
}

/// A finite-distance pair with its current label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportPair {
    pub a: u32,
    pub b: u32,
    pub label: RelationshipLabel,
    pub c_ab: u32,
    pub c_ba: u32,
    pub intersection: f64,
    pub union: f64,
    pub jaccard: f64,
    pub distance: f64,
}

impl ReportPair {
    pub fn key(&self) -> PairKey {
        PairKey { a: self.a, b: self.b }
    }

    pub fn score(&self) -> PairScore {
        PairScore {
            key: self.key(),
            c_ab: self.c_ab,
            c_ba: self.c_ba,
            intersection: self.intersection,
            union_: self.union,
            jaccard: self.jaccard,
            distance: self.distance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub format: String,
    /// 0 after scoring; each curation pass increments it.
    pub version: u64,
    pub pipeline_version: String,
    pub config: ReportConfig,
    pub total_pairs: u64,
    /// Pairs without a single accepted match (`distance = +inf`), all labels.
    pub no_evidence_pairs: u64,
    pub images: Vec<ImageMeta>,
    pub relations: Vec<Relation>,
    pub pairs: Vec<ReportPair>,
    pub stats: Vec<ClassStats>,
    pub flags: Vec<Flag>,
    pub decisions_applied: usize,
    pub audit: Vec<AuditEntry>,
    pub warnings: Vec<String>,
}

impl ReportDocument {
    fn assemble(
        images: Vec<ImageMeta>,
        relations: Vec<Relation>,
        labeled: &LabeledSet,
        flags: Vec<Flag>,
        config: PipelineConfig,
        version: u64,
    ) -> ReportDocument {
        let n = images.len() as u64;
        let pairs: Vec<ReportPair> = labeled
            .pairs
            .iter()
            .filter(|p| p.score.distance.is_finite())
            .map(|p| ReportPair {
                a: p.score.key.a,
                b: p.score.key.b,
                label: p.label,
                c_ab: p.score.c_ab,
                c_ba: p.score.c_ba,
                intersection: p.score.intersection,
                union: p.score.union_,
                jaccard: p.score.jaccard,
                distance: p.score.distance,
            })
            .collect();
        ReportDocument {
            format: REPORT_FORMAT.into(),
            version,
            pipeline_version: PIPELINE_VERSION.into(),
            config: ReportConfig {
                log_base: "e".into(),
                pipeline: config,
            },
            total_pairs: total_pairs(n),
            no_evidence_pairs: total_pairs(n) - pairs.len() as u64,
            images,
            relations,
            pairs,
            stats: class_stats(labeled).into_values().collect(),
            flags,
            decisions_applied: 0,
            audit: Vec::new(),
            warnings: labeled.warnings.clone(),
        }
    }

    /// Labels scored pairs and summarizes them; no flags yet.
    pub fn scored(
        images: Vec<ImageMeta>,
        relations: Vec<Relation>,
        scores: &[PairScore],
        config: PipelineConfig,
    ) -> Result<ReportDocument> {
        let finite: Vec<PairScore> = scores.iter().filter(|s| s.distance.is_finite()).copied().collect();
        let labeled = assign_labels(&images, &relations, &finite)?;
        Ok(Self::assemble(images, relations, &labeled, Vec::new(), config, 0))
    }

    pub fn scores(&self) -> Vec<PairScore> {
        self.pairs.iter().map(ReportPair::score).collect()
    }

    /// Recomputes labels (with `decisions`), statistics and flags from the
    /// stored pair scores and returns the next version.
    pub fn curated(&self, params: &FlagParams, decisions: &[Decision]) -> Result<ReportDocument> {
        params.validate()?;
        let scores = self.scores();
        let base = assign_labels(&self.images, &self.relations, &scores)?;
        let (labeled, audit) = apply_decisions(&self.images, &self.relations, &scores, &base, decisions)?;
        let stats = class_stats(&labeled);
        let flags = flag_outliers(&labeled, &stats, params);
        let mut config = self.config.pipeline.clone();
        config.flags = params.clone();
        let mut doc = Self::assemble(
            self.images.clone(),
            self.relations.clone(),
            &labeled,
            flags,
            config,
            self.version + 1,
        );
        doc.decisions_applied = decisions.len();
        doc.audit = audit;
        Ok(doc)
    }

    pub fn image_index(&self) -> HashMap<&str, u32> {
        self.images.iter().enumerate().map(|(i, m)| (m.image_id.as_str(), i as u32)).collect()
    }

    pub fn resolve_decisions(&self, records: &[DecisionRecord]) -> Result<Vec<Decision>> {
        let ix = self.image_index();
        records.iter().map(|r| r.resolve(|id| ix.get(id).copied())).collect()
    }

    pub fn stats_for(&self, label: RelationshipLabel) -> Option<&ClassStats> {
        self.stats.iter().find(|s| s.label == label)
    }

    /// Checks the structural invariants a consumer relies on.
    pub fn validate(&self) -> Result<()> {
        if self.format != REPORT_FORMAT {
            return Err(Error::Format(format!("not a report (format {:?})", self.format)));
        }
        let n = self.images.len() as u32;
        let ids: BTreeSet<&str> = self.images.iter().map(|m| m.image_id.as_str()).collect();
        if ids.len() != self.images.len() {
            return Err(Error::Consistency("report lists an image id twice".into()));
        }
        if self.total_pairs != total_pairs(n as u64) {
            return Err(Error::Consistency(format!(
                "total_pairs {} does not match {n} images",
                self.total_pairs
            )));
        }
        let mut seen = BTreeSet::new();
        for p in &self.pairs {
            if p.a >= p.b || p.b >= n || !seen.insert(p.key()) {
                return Err(Error::Consistency(format!("invalid or repeated pair ({}, {})", p.a, p.b)));
            }
            if !p.distance.is_finite() || p.distance < 0.0 {
                return Err(Error::Consistency(format!("pair ({}, {}) has distance {}", p.a, p.b, p.distance)));
            }
        }
        if self.no_evidence_pairs != self.total_pairs - self.pairs.len() as u64 {
            return Err(Error::Consistency("no_evidence_pairs does not match the pair list".into()));
        }
        for f in &self.flags {
            if f.pair.b >= n {
                return Err(Error::Consistency(format!("flag references image index {}", f.pair.b)));
            }
        }
        Ok(())
    }

    /// Pretty JSON with a trailing newline. Identical documents serialize to
    /// identical bytes.
    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("report serializes");
        v.push(b'\n');
        v
    }

    pub fn from_json(bytes: &[u8]) -> Result<ReportDocument> {
        let doc: ReportDocument = serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("report: {e}")))?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn read(path: &Path) -> Result<ReportDocument> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            Error::Consistency(m) => Error::Consistency(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
