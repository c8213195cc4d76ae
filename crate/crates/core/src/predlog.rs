//! Newline-delimited JSON prediction logs, one record per instance:
//!
//! ```text
//! {"id": "17", "label": 3, "true_label": 1, "seq": [0,0,1,1], "losses": [2.1,1.7,0.4,0.3]}
//! ```
//!
//! `true_label` and `losses` may be null. Every `seq` in a log has the same
//! length: the epoch count of the round.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::PredictionSequence;
use crate::id::InstanceId;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate id {id} on line {line}")]
    DuplicateId { line: usize, id: InstanceId },
    #[error("log is missing {} id(s): {}", .0.len(), join(.0))]
    MissingIds(Vec<InstanceId>),
    #[error("log has {} unexpected id(s): {}", .0.len(), join(.0))]
    UnexpectedIds(Vec<InstanceId>),
    #[error("sequence for id {id} has length {got}, expected {expected}")]
    InconsistentLength { id: InstanceId, expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn join(ids: &[InstanceId]) -> String {
    const SHOW: usize = 10;
    let mut s = ids.iter().take(SHOW).map(|i| i.as_str()).collect::<Vec<_>>().join(", ");
    if ids.len() > SHOW {
        s.push_str(", ...");
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub id: InstanceId,
    /// Observed (possibly noisy) label.
    pub label: usize,
    pub true_label: Option<usize>,
    pub seq: Vec<u8>,
    pub losses: Option<Vec<f64>>,
}

impl LogRecord {
    pub fn sequence(&self) -> PredictionSequence {
        PredictionSequence::from_bits(self.id.clone(), self.seq.clone()).expect("validated on read")
    }

    pub fn is_clean(&self) -> Option<bool> {
        self.true_label.map(|t| t == self.label)
    }
}

pub fn write_log<W: Write>(mut w: W, records: &[LogRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Parses a log; blank lines are skipped. Errors carry 1-based line numbers.
pub fn read_log<R: BufRead>(r: R) -> Result<Vec<LogRecord>, LogError> {
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    let mut epochs = None;
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord =
            serde_json::from_str(&line).map_err(|e| LogError::Malformed { line: line_no, message: e.to_string() })?;
        if let Some(bad) = rec.seq.iter().find(|&&b| b > 1) {
            return Err(LogError::Malformed { line: line_no, message: format!("status {bad} is not 0 or 1") });
        }
        if rec.seq.is_empty() {
            return Err(LogError::Malformed { line: line_no, message: "empty seq".into() });
        }
        if let Some(l) = &rec.losses {
            if l.len() != rec.seq.len() {
                return Err(LogError::Malformed {
                    line: line_no,
                    message: format!("{} losses for {} epochs", l.len(), rec.seq.len()),
                });
            }
        }
        match epochs {
            None => epochs = Some(rec.seq.len()),
            Some(e) if e != rec.seq.len() => {
                return Err(LogError::InconsistentLength { id: rec.id, expected: e, got: rec.seq.len() })
            }
            _ => {}
        }
        if !seen.insert(rec.id.clone()) {
            return Err(LogError::DuplicateId { line: line_no, id: rec.id });
        }
        records.push(rec);
    }
    Ok(records)
}

/// Checks that a log covers exactly `expected` with `epochs`-long sequences.
pub fn validate_log(records: &[LogRecord], expected: &[InstanceId], epochs: usize) -> Result<(), LogError> {
    let have: BTreeSet<&InstanceId> = records.iter().map(|r| &r.id).collect();
    let want: BTreeSet<&InstanceId> = expected.iter().collect();
    let missing: Vec<InstanceId> = want.difference(&have).map(|&i| i.clone()).collect();
    if !missing.is_empty() {
        return Err(LogError::MissingIds(missing));
    }
    let extra: Vec<InstanceId> = have.difference(&want).map(|&i| i.clone()).collect();
    if !extra.is_empty() {
        return Err(LogError::UnexpectedIds(extra));
    }
    if let Some(r) = records.iter().find(|r| r.seq.len() != epochs) {
        return Err(LogError::InconsistentLength { id: r.id.clone(), expected: epochs, got: r.seq.len() });
    }
    Ok(())
}

/// Ground-truth clean flags for records that carry a true label.
pub fn clean_mask(records: &[LogRecord]) -> Option<BTreeMap<InstanceId, bool>> {
    records.iter().map(|r| r.is_clean().map(|c| (r.id.clone(), c))).collect()
}
