//! Cohort metadata and relation tables (CSV with a header row).

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use serde::Deserialize;

use crate::curation::{Relation, RelationshipLabel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct MetadataRow {
    pub image_id: String,
    pub subject_id: String,
    pub database: String,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub path: Option<String>,
}

fn empty_as_none<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<String>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    Ok(s.filter(|s| !s.trim().is_empty()))
}

fn csv_error(what: &str, e: csv::Error) -> Error {
    let line = e.position().map(|p| format!(" (line {})", p.line())).unwrap_or_default();
    Error::Format(format!("{what}{line}: {e}"))
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(r)
}

pub fn parse_metadata<R: Read>(r: R) -> Result<Vec<MetadataRow>> {
    let mut rows: Vec<MetadataRow> = Vec::new();
    let mut seen = BTreeSet::new();
    for rec in reader(r).deserialize() {
        let row: MetadataRow = rec.map_err(|e| csv_error("metadata", e))?;
        if row.image_id.is_empty() || row.subject_id.is_empty() || row.database.is_empty() {
            return Err(Error::Format(format!(
                "metadata row {}: image_id, subject_id and database are required",
                rows.len() + 2
            )));
        }
        if !seen.insert(row.image_id.clone()) {
            return Err(Error::Consistency(format!("duplicate image_id {:?} in metadata", row.image_id)));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn parse_relations<R: Read>(r: R) -> Result<Vec<Relation>> {
    let mut out = Vec::new();
    for rec in reader(r).deserialize() {
        let rel: Relation = rec.map_err(|e| csv_error("relations", e))?;
        if !matches!(rel.label, RelationshipLabel::MZ | RelationshipLabel::DZ | RelationshipLabel::FS) {
            return Err(Error::Format(format!(
                "relations row {}: label must be MZ, DZ or FS, got {}",
                out.len() + 2,
                rel.label
            )));
        }
        out.push(rel);
    }
    Ok(out)
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

/// Reads a metadata table; relative `path` entries are resolved against the
/// table's directory.
pub fn read_metadata(path: &Path) -> Result<Vec<MetadataRow>> {
    let mut rows = parse_metadata(open(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for r in &mut rows {
        if let Some(p) = &r.path {
            if Path::new(p).is_relative() {
                r.path = Some(base.join(p).to_string_lossy().into_owned());
            }
        }
    }
    Ok(rows)
}

pub fn read_relations(path: &Path) -> Result<Vec<Relation>> {
    parse_relations(open(path)?)
}
