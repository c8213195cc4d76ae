//! Selection quality against ground truth, plus the CSV/JSON exports used
//! for reports and plots. Clean instances are the positive class: selecting
//! everything gives recall 1.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::id::InstanceId;
use crate::mixture::{threshold_with, MixtureFit, ThresholdRule};
use crate::trainer::data::{Split, ToyDataset};
use crate::trainer::model::Classifier;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("clean mask does not cover {} selected id(s), e.g. {}", .0.len(), .0[0])]
    UncoveredIds(Vec<InstanceId>),
    #[error("test split is empty")]
    EmptyTestSplit,
    #[error("histogram needs at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("no scores to export")]
    NoScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub round: usize,
    pub kept: usize,
    /// Absent when nothing was selected.
    pub precision: Option<f64>,
    /// Absent when there are no clean instances.
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn selection_precision_recall(
    selected: &BTreeSet<InstanceId>,
    clean_mask: &BTreeMap<InstanceId, bool>,
    round: usize,
) -> Result<SelectionStats, EvalError> {
    let uncovered: Vec<InstanceId> = selected.iter().filter(|id| !clean_mask.contains_key(*id)).cloned().collect();
    if !uncovered.is_empty() {
        return Err(EvalError::UncoveredIds(uncovered));
    }
    let hits = selected.iter().filter(|id| clean_mask[*id]).count();
    let n_clean = clean_mask.values().filter(|&&c| c).count();
    let precision = (!selected.is_empty()).then(|| hits as f64 / selected.len() as f64);
    let recall = (n_clean > 0).then(|| hits as f64 / n_clean as f64);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(SelectionStats { round, kept: selected.len(), precision, recall, f1 })
}

/// Fraction of test rows whose prediction matches the true label.
pub fn test_accuracy(model: &impl Classifier, ds: &ToyDataset) -> Result<f64, EvalError> {
    let rows = ds.indices(Split::Test);
    if rows.is_empty() {
        return Err(EvalError::EmptyTestSplit);
    }
    let hits = rows.iter().filter(|&&i| model.predict(&ds.features[i]) == ds.true_labels[i]).count();
    Ok(hits as f64 / rows.len() as f64)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

/// One row of the per-round trend: quality of the set a round trained on
/// and the test accuracy reached at the end of that round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub round: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: Option<f64>,
}

pub fn round_trend_report(rows: &[TrendRow]) -> String {
    let mut out = String::from("round,precision,recall,accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.round, opt(r.precision), opt(r.recall), opt(r.accuracy));
    }
    out
}

/// Per-round selection statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundStatsRow {
    pub round: usize,
    pub kept: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub threshold: Option<f64>,
    pub converged: Option<bool>,
}

pub fn round_stats_csv(rows: &[RoundStatsRow]) -> String {
    let mut out = String::from("round,kept,precision,recall,test_accuracy,threshold,converged\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.round,
            r.kept,
            opt(r.precision),
            opt(r.recall),
            opt(r.test_accuracy),
            opt(r.threshold),
            r.converged.map_or_else(String::new, |c| c.to_string())
        );
    }
    out
}

/// One selector's line in a strategy comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: Option<f64>,
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("method,precision,recall,accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.method, opt(r.precision), opt(r.recall), opt(r.accuracy));
    }
    out
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some((mean, var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub clean: usize,
    pub noisy: usize,
    /// Ids absent from the clean mask.
    pub unknown: usize,
}

impl HistogramBin {
    pub fn total(&self) -> usize {
        self.clean + self.noisy + self.unknown
    }
}

/// Mixture density samples for overlaying on the histogram. Densities are
/// weighted by the mixing proportions, so their sum is the mixture density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub x: Vec<f64>,
    pub density_clean: Vec<f64>,
    pub density_noisy: Vec<f64>,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramExport {
    pub bins: Vec<HistogramBin>,
    pub overlay: Option<Overlay>,
}

pub const OVERLAY_POINTS: usize = 200;

pub fn histogram_export(
    scores: &BTreeMap<InstanceId, f64>,
    clean_mask: Option<&BTreeMap<InstanceId, bool>>,
    bins: usize,
    fit: Option<&MixtureFit>,
    rule: ThresholdRule,
) -> Result<HistogramExport, EvalError> {
    if bins < 2 {
        return Err(EvalError::TooFewBins(bins));
    }
    if scores.is_empty() {
        return Err(EvalError::NoScores);
    }
    let min = scores.values().copied().fold(f64::INFINITY, f64::min);
    let max = scores.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|k| HistogramBin {
            lower: min + k as f64 * width,
            upper: if k + 1 == bins { max } else { min + (k + 1) as f64 * width },
            clean: 0,
            noisy: 0,
            unknown: 0,
        })
        .collect();
    for (id, &s) in scores {
        let k = if width > 0.0 { (((s - min) / width) as usize).min(bins - 1) } else { 0 };
        match clean_mask.and_then(|m| m.get(id)) {
            Some(true) => out[k].clean += 1,
            Some(false) => out[k].noisy += 1,
            None => out[k].unknown += 1,
        }
    }

    let overlay = fit.map(|fit| {
        let x: Vec<f64> =
            (0..OVERLAY_POINTS).map(|i| min + (max - min) * i as f64 / (OVERLAY_POINTS - 1) as f64).collect();
        let (density_clean, density_noisy) = x.iter().map(|&v| fit.component_densities(v - fit.shift)).unzip();
        Overlay { x, density_clean, density_noisy, threshold: threshold_with(fit, rule) }
    });
    Ok(HistogramExport { bins: out, overlay })
}

impl HistogramExport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,lower,upper,clean,noisy,unknown\n");
        for (k, b) in self.bins.iter().enumerate() {
            let _ = writeln!(out, "{k},{},{},{},{},{}", b.lower, b.upper, b.clean, b.noisy, b.unknown);
        }
        out
    }
}
