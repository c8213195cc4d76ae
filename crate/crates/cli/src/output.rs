//! File layout shared by the commands.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufReader;
use std::path::Path;

use dynasel::evaluation::SelectionStats;
use dynasel::mixture::{MixtureReport, ThresholdRule};
use dynasel::predlog::{read_log, LogRecord};
use dynasel::selection::{SelectionResult, Strategy};
use dynasel::InstanceId;
use serde::Serialize;

use crate::error::CliError;

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent.display(), e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path.display(), e))
}

/// Writes through a temporary file so a crash never leaves a torn file.
pub fn write_atomic(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    write_file(&tmp, contents)?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path.display(), e))
}

pub fn remove_if_present(path: &Path) -> Result<(), CliError> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(CliError::io(path.display(), e)),
        _ => Ok(()),
    }
}

pub fn to_json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn ids_text<'a>(ids: impl IntoIterator<Item = &'a InstanceId>) -> String {
    ids.into_iter().map(|id| format!("{id}\n")).collect()
}

pub fn read_ids(path: &Path) -> Result<BTreeSet<InstanceId>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(InstanceId::new).collect())
}

pub fn read_log_file(path: &Path) -> Result<Vec<LogRecord>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    read_log(BufReader::new(file)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_log_file(path: &Path, records: &[LogRecord]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    dynasel::predlog::write_log(&mut buf, records).map_err(|e| CliError::io(path.display(), e))?;
    write_file(path, buf)
}

pub fn clean_mask_csv(mask: &BTreeMap<InstanceId, bool>) -> String {
    let mut out = String::from("id,clean\n");
    for (id, &clean) in mask {
        out.push_str(&format!("{id},{}\n", u8::from(clean)));
    }
    out
}

/// Reads `id,clean` rows (`1`/`0` or `true`/`false`).
pub fn read_clean_mask(path: &Path) -> Result<BTreeMap<InstanceId, bool>, CliError> {
    let bad = |msg: String| CliError::Data(format!("{}: {msg}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?;
    if headers != vec!["id", "clean"] {
        return Err(bad(format!("expected header id,clean, got {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut mask = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let clean = match &rec[1] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(bad(format!("line {}: clean flag {other:?}", i + 2))),
        };
        mask.insert(InstanceId::new(&rec[0]), clean);
    }
    Ok(mask)
}

/// Ground truth from a clean-mask CSV or, for `.jsonl`, a log with true labels.
pub fn read_truth(path: &Path) -> Result<BTreeMap<InstanceId, bool>, CliError> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let records = read_log_file(path)?;
        dynasel::predlog::clean_mask(&records)
            .ok_or_else(|| CliError::Data(format!("{}: some records lack true_label", path.display())))
    } else {
        read_clean_mask(path)
    }
}

pub fn scores_csv(scores: &BTreeMap<InstanceId, f64>) -> String {
    let mut out = String::from("id,score\n");
    for (id, s) in scores {
        out.push_str(&format!("{id},{s}\n"));
    }
    out
}

#[derive(Serialize)]
struct SelectionSummary<'a> {
    round: usize,
    strategy: &'a Strategy,
    total: usize,
    kept: usize,
    threshold: Option<f64>,
    fallback: Option<&'a str>,
    empty_selection: bool,
    stats: Option<&'a SelectionStats>,
    mixture: Option<MixtureReport>,
}

/// `selected_ids.txt`, `scores.csv` and `mixture.json` for one selection.
pub fn write_selection(dir: &Path, result: &SelectionResult, rule: ThresholdRule) -> Result<(), CliError> {
    let summary = SelectionSummary {
        round: result.round_index,
        strategy: &result.strategy,
        total: result.metric_scores.len(),
        kept: result.selected_ids.len(),
        threshold: result.threshold,
        fallback: result.fallback.as_deref(),
        empty_selection: result.empty_selection,
        stats: result.stats.as_ref(),
        mixture: result.fit.as_ref().map(|f| f.to_report(rule)),
    };
    write_file(&dir.join("selected_ids.txt"), ids_text(&result.selected_ids))?;
    write_file(&dir.join("scores.csv"), scores_csv(&result.metric_scores))?;
    write_file(&dir.join("mixture.json"), to_json(&summary))
}
