//! Append-only JSON-lines decision log. Pairs are written as image ids so
//! the log stays valid when images are reordered.

use std::io::Write;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::curation::{Decision, Verdict};
use crate::error::{Error, Result};
use crate::pairwise::PairKey;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRecord {
    pub pair: [String; 2],
    pub verdict: Verdict,
    pub curator: String,
    pub timestamp: DateTime<Utc>,
}

impl DecisionRecord {
    /// Resolves image ids through `lookup` into a canonical pair.
    pub fn resolve(&self, lookup: impl Fn(&str) -> Option<u32>) -> Result<Decision> {
        let ix = |id: &str| lookup(id).ok_or_else(|| Error::Consistency(format!("decision references unknown image {id:?}")));
        let pair = PairKey::new(ix(&self.pair[0])?, ix(&self.pair[1])?)?;
        Ok(Decision {
            pair,
            verdict: self.verdict,
            curator: self.curator.clone(),
            timestamp: self.timestamp,
        })
    }

    /// One log line, without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::json!({
            "pair": self.pair,
            "verdict": self.verdict,
            "curator": self.curator,
            "timestamp": self.timestamp.to_rfc3339_opts(SecondsFormat::Millis, true),
        })
        .to_string()
    }
}

/// Parses a log; blank lines are skipped and errors carry the 1-based line.
pub fn parse_decisions(text: &str) -> Result<Vec<DecisionRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("decisions line {}: {e}", i + 1)))
        })
        .collect()
}

/// A missing file reads as an empty log.
pub fn read_decisions(path: &Path) -> Result<Vec<DecisionRecord>> {
    match std::fs::read_to_string(path) {
        Ok(t) => parse_decisions(&t).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn append_decision(path: &Path, rec: &DecisionRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = rec.to_line();
    line.push('\n');
    f.write_all(line.as_bytes()).and_then(|_| f.flush()).map_err(|e| Error::io(path, e))
}
