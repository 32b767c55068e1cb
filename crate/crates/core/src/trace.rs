//! Decision-trace rows (one JSON object per task) and their replay through
//! the grow/reuse rule.
//!
//! Set ids are 0-based pool indices; HFC values are stored in degrees and
//! converted to radians before deciding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lw2g::{decide, DecisionKind, HindranceRecord};
use crate::pool::Registry;
use crate::subspace::Hfc;
use crate::trainer::TaskReport;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub set: usize,
    pub hfc_old_deg: f64,
    pub hfc_pre_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRow {
    pub task: u32,
    #[serde(default)]
    pub records: Vec<TraceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<DecisionKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_after: Option<BTreeMap<usize, Vec<u32>>>,
}

impl TraceRow {
    pub fn from_report<T: Scalar>(r: &TaskReport<T>) -> Self {
        Self {
            task: r.task,
            records: r
                .records
                .iter()
                .map(|h| TraceRecord {
                    set: h.set_id,
                    hfc_old_deg: h.hfc_old.degrees(),
                    hfc_pre_deg: h.hfc_pre.degrees(),
                    z: Some(h.z.as_f64().to_degrees()),
                })
                .collect(),
            decision: Some(r.decision),
            pool_after: Some(r.pool_after.clone()),
        }
    }
}

/// Parses JSON lines; blank lines are skipped, line numbers are 1-based.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRow>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedTrace {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn to_jsonl(rows: &[TraceRow]) -> Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// One replayed decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayStep {
    pub task: u32,
    /// `(set, z in degrees)` per record, in input order.
    pub z: Vec<(usize, f64)>,
    pub decision: DecisionKind,
    pub pool_after: BTreeMap<usize, Vec<u32>>,
}

/// Re-decides every row from its HFC pairs alone, ignoring any recorded
/// `z`, `decision` or `pool_after`. Each row must carry exactly one record
/// per set in the pool at that point.
pub fn replay(rows: &[TraceRow]) -> Result<Vec<ReplayStep>> {
    let mut registry = Registry::new();
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let bad = |reason: String| Error::MalformedTrace {
            line: i + 1,
            reason,
        };
        let mut sets: Vec<usize> = row.records.iter().map(|r| r.set).collect();
        sets.sort_unstable();
        if sets != (0..registry.len()).collect::<Vec<_>>() {
            return Err(bad(format!(
                "task {} has records for sets {:?} but the pool holds {} set(s)",
                row.task,
                sets,
                registry.len()
            )));
        }
        let mut hindrance = Vec::with_capacity(row.records.len());
        for r in &row.records {
            if !(r.hfc_old_deg.is_finite() && r.hfc_pre_deg.is_finite()) {
                return Err(bad(format!("non-finite HFC for set {}", r.set)));
            }
            let hfc = |deg: f64| Hfc {
                angle: deg.to_radians(),
                grad_norm: 1.0,
            };
            hindrance.push(HindranceRecord::new(
                r.set,
                hfc(r.hfc_old_deg),
                hfc(r.hfc_pre_deg),
            ));
        }
        let decision = decide(hindrance);
        match decision.kind {
            DecisionKind::Grow => {
                registry.grow(row.task)?;
            }
            DecisionKind::Reuse(j) => registry.assign(j, row.task)?,
        }
        out.push(ReplayStep {
            task: row.task,
            z: decision
                .records
                .iter()
                .map(|r| (r.set_id, r.z.to_degrees()))
                .collect(),
            decision: decision.kind,
            pool_after: registry.assignments(),
        });
    }
    Ok(out)
}

/// Reads a JSON-lines trace file and replays it.
pub fn replay_trace(path: &std::path::Path) -> Result<Vec<ReplayStep>> {
    replay(&parse_trace(&std::fs::read_to_string(path)?)?)
}
