//! One selection round and the multi-round driver.
//!
//! A round trains for `epochs` epochs on the current set, recording each
//! instance's status before every gradient step, scores the sequences,
//! fits the mixture, and keeps the instances scoring strictly below the
//! threshold. The kept set and the trained model feed the next round.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{score_sequences, DynamicsError, MetricKind};
use crate::evaluation::{
    selection_precision_recall, ComparisonRow, EvalError, RoundStatsRow, SelectionStats, TrendRow,
};
use crate::id::InstanceId;
use crate::mixture::{fit_raw_scores, threshold_with, FitConfig, MixtureError, MixtureFit};
use crate::predlog::{validate_log, LogError, LogRecord};
use crate::trainer::external::ExternalError;
use crate::trainer::TrainerError;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("selection ratio {0} must lie in (0, 1]")]
    InvalidRatio(f64),
    #[error("invalid round config: {0}")]
    InvalidConfig(String),
    #[error("no scores to select from")]
    EmptyScores,
    #[error("no recorded loss for {} id(s): {}", .0.len(), .0.iter().take(10).map(|i| i.as_str()).collect::<Vec<_>>().join(", "))]
    MissingLosses(Vec<InstanceId>),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Mixture(#[from] MixtureError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    External(#[from] ExternalError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Keep scores strictly below the mixture threshold.
    MixtureThreshold,
    /// Keep the `R` fraction with the smallest scores.
    Ratio(f64),
    /// Keep the `R` fraction with the smallest loss at the designated epoch.
    SmallLoss(f64),
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::MixtureThreshold => "mixture_threshold",
            Strategy::Ratio(_) => "ratio",
            Strategy::SmallLoss(_) => "small_loss",
        }
    }
}

/// Which epoch's losses rank instances for the small-loss selector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossEpoch {
    #[default]
    Final,
    /// Epoch with the highest validation accuracy; the runner must report
    /// per-epoch validation accuracy.
    BestValidation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundConfig {
    pub epochs: usize,
    pub lambda: f64,
    pub strategy: Strategy,
    pub metric_kind: MetricKind,
    pub rounds: usize,
    /// Ratio used when the mixture fit fails; `None` makes the failure fatal.
    /// Written as a number or `"none"`.
    #[serde(with = "fallback_repr")]
    pub fallback_ratio: Option<f64>,
    pub reset_model_per_round: bool,
    pub loss_epoch: LossEpoch,
    pub fit: FitConfig,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lambda: 1.0,
            strategy: Strategy::MixtureThreshold,
            metric_kind: MetricKind::Simplified,
            rounds: 1,
            fallback_ratio: Some(0.9),
            reset_model_per_round: false,
            loss_epoch: LossEpoch::Final,
            fit: FitConfig::default(),
        }
    }
}

mod fallback_repr {
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(r) => s.serialize_f64(*r),
            None => s.serialize_str("none"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Ratio(f64),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Ratio(r) => Ok(Some(r)),
            Repr::Word(w) if w == "none" => Ok(None),
            Repr::Word(w) => Err(D::Error::custom(format!("fallback_ratio {w:?}: expected a ratio or \"none\""))),
        }
    }
}

fn check_ratio(r: f64) -> Result<(), SelectionError> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(SelectionError::InvalidRatio(r))
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        if self.epochs == 0 {
            return Err(SelectionError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.rounds == 0 {
            return Err(SelectionError::InvalidConfig("rounds must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(SelectionError::InvalidConfig(format!("lambda {} must be >= 0", self.lambda)));
        }
        match self.strategy {
            Strategy::Ratio(r) | Strategy::SmallLoss(r) => check_ratio(r)?,
            Strategy::MixtureThreshold => {}
        }
        if let Some(r) = self.fallback_ratio {
            check_ratio(r)?;
        }
        let f = &self.fit;
        if !(f.tol > 0.0 && f.shift_epsilon > 0.0 && f.newton_tol > 0.0 && f.max_iters > 0 && f.newton_max_iters > 0) {
            return Err(SelectionError::InvalidConfig("fit tolerances and iteration caps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub round_index: usize,
    /// Strategy that produced the selection (the fallback, if one engaged).
    pub strategy: Strategy,
    pub selected_ids: BTreeSet<InstanceId>,
    pub threshold: Option<f64>,
    pub metric_scores: BTreeMap<InstanceId, f64>,
    pub fit: Option<MixtureFit>,
    pub stats: Option<SelectionStats>,
    /// Why the configured strategy was replaced, if it was.
    pub fallback: Option<String>,
    /// Set when nothing was selected.
    pub empty_selection: bool,
}

impl SelectionResult {
    fn new(strategy: Strategy, selected_ids: BTreeSet<InstanceId>, metric_scores: BTreeMap<InstanceId, f64>) -> Self {
        let empty_selection = selected_ids.is_empty();
        Self {
            round_index: 0,
            strategy,
            selected_ids,
            threshold: None,
            metric_scores,
            fit: None,
            stats: None,
            fallback: None,
            empty_selection,
        }
    }
}

/// Keeps ids with `score < tau`; ties with `tau` are rejected.
pub fn select_by_threshold(scores: &BTreeMap<InstanceId, f64>, tau: f64) -> SelectionResult {
    let selected = scores.iter().filter(|(_, &s)| s < tau).map(|(id, _)| id.clone()).collect();
    let mut r = SelectionResult::new(Strategy::MixtureThreshold, selected, scores.clone());
    r.threshold = Some(tau);
    r
}

/// Number kept by ratio `r` of `n`: `ceil(r n)`, guarded against
/// floating-point overshoot such as `0.9 * 10 = 9.000000000000002`.
pub fn ratio_count(r: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    ((r * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

fn smallest(scores: &BTreeMap<InstanceId, f64>, r: f64) -> BTreeSet<InstanceId> {
    let mut ranked: Vec<(&InstanceId, f64)> = scores.iter().map(|(id, &s)| (id, s)).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().take(ratio_count(r, scores.len())).map(|(id, _)| id.clone()).collect()
}

/// Keeps the `ceil(r |D|)` smallest scores; ties broken by ascending id.
pub fn select_by_ratio(scores: &BTreeMap<InstanceId, f64>, r: f64) -> Result<SelectionResult, SelectionError> {
    check_ratio(r)?;
    Ok(SelectionResult::new(Strategy::Ratio(r), smallest(scores, r), scores.clone()))
}

/// Ranks by the loss at `epoch` (the last recorded one when `None`) and
/// keeps the `r` fraction with the smallest loss.
pub fn small_loss_select(
    epoch_losses: &BTreeMap<InstanceId, Vec<f64>>,
    r: f64,
    epoch: Option<usize>,
) -> Result<SelectionResult, SelectionError> {
    check_ratio(r)?;
    let mut at_epoch = BTreeMap::new();
    let mut missing = Vec::new();
    for (id, losses) in epoch_losses {
        match epoch.map_or(losses.last(), |e| losses.get(e)) {
            Some(&l) => {
                at_epoch.insert(id.clone(), l);
            }
            None => missing.push(id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(SelectionError::MissingLosses(missing));
    }
    Ok(SelectionResult::new(Strategy::SmallLoss(r), smallest(&at_epoch, r), at_epoch))
}

/// Everything a round's training produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundLog {
    pub records: Vec<LogRecord>,
    /// Validation accuracy after each epoch, when the runner tracks it.
    pub validation_accuracy: Option<Vec<f64>>,
}

/// Produces a round's prediction log for the active ids. Implemented by the
/// built-in trainer, the external-command bridge and log replay.
pub trait RoundRunner {
    fn run_round(&mut self, round: usize, active: &[InstanceId], epochs: usize) -> Result<RoundLog, SelectionError>;

    /// Re-initializes the model; called between rounds when configured.
    fn reset_model(&mut self) {}

    /// Test accuracy of the current model, if the runner can measure it.
    fn test_accuracy(&self) -> Option<f64> {
        None
    }
}

/// Scores a round's log and applies the configured strategy.
pub fn select_from_log(
    log: &RoundLog,
    config: &RoundConfig,
    round: usize,
    clean_mask: Option<&BTreeMap<InstanceId, bool>>,
) -> Result<SelectionResult, SelectionError> {
    if log.records.is_empty() {
        return Err(SelectionError::EmptyScores);
    }
    let sequences: Vec<_> = log.records.iter().map(LogRecord::sequence).collect();
    let scores = score_sequences(&sequences, config.lambda, config.metric_kind)?;

    let mut result = match config.strategy {
        Strategy::MixtureThreshold => {
            let raw: Vec<f64> = scores.values().copied().collect();
            match fit_raw_scores(&raw, &config.fit) {
                Ok(fit) => {
                    let mut r = select_by_threshold(&scores, threshold_with(&fit, config.fit.threshold_rule));
                    r.fit = Some(fit);
                    r
                }
                Err(err) => {
                    let ratio = config.fallback_ratio.ok_or(err.clone())?;
                    let mut r = select_by_ratio(&scores, ratio)?;
                    r.fallback = Some(format!("mixture fit failed ({err}); kept ratio {ratio}"));
                    r
                }
            }
        }
        Strategy::Ratio(r) => select_by_ratio(&scores, r)?,
        Strategy::SmallLoss(r) => {
            let losses: BTreeMap<InstanceId, Vec<f64>> =
                log.records.iter().map(|rec| (rec.id.clone(), rec.losses.clone().unwrap_or_default())).collect();
            let epoch = match config.loss_epoch {
                LossEpoch::Final => None,
                LossEpoch::BestValidation => {
                    let acc = log.validation_accuracy.as_ref().ok_or_else(|| {
                        SelectionError::InvalidConfig("best_validation needs per-epoch validation accuracy".into())
                    })?;
                    // First epoch reaching the maximum.
                    let best = acc.iter().enumerate().fold(0, |b, (i, &a)| if a > acc[b] { i } else { b });
                    Some(best)
                }
            };
            let mut sel = small_loss_select(&losses, r, epoch)?;
            sel.metric_scores = scores;
            sel
        }
    };
    result.round_index = round;
    if let Some(mask) = clean_mask {
        result.stats = Some(selection_precision_recall(&result.selected_ids, mask, round)?);
    }
    Ok(result)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    pub result: SelectionResult,
    pub log: RoundLog,
    pub test_accuracy: Option<f64>,
}

/// Runs one round on `active` and selects from its log.
pub fn run_round<R: RoundRunner + ?Sized>(
    runner: &mut R,
    active: &[InstanceId],
    config: &RoundConfig,
    round: usize,
    clean_mask: Option<&BTreeMap<InstanceId, bool>>,
) -> Result<RoundOutcome, SelectionError> {
    config.validate()?;
    if active.is_empty() {
        return Err(SelectionError::EmptyScores);
    }
    let log = runner.run_round(round, active, config.epochs)?;
    validate_log(&log.records, active, config.epochs)?;
    let mask = clean_mask.map(|m| restrict(m, active));
    let result = select_from_log(&log, config, round, mask.as_ref())?;
    Ok(RoundOutcome { result, log, test_accuracy: runner.test_accuracy() })
}

fn restrict(mask: &BTreeMap<InstanceId, bool>, ids: &[InstanceId]) -> BTreeMap<InstanceId, bool> {
    ids.iter().filter_map(|id| mask.get(id).map(|&c| (id.clone(), c))).collect()
}

/// One completed round of a multi-round run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub result: SelectionResult,
    /// Quality of the set this round trained on, measured against the
    /// full training set's clean instances.
    pub input_stats: Option<SelectionStats>,
    /// Quality of the selection, measured the same way.
    pub output_stats: Option<SelectionStats>,
    pub test_accuracy: Option<f64>,
}

/// Resumable multi-round progress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiRoundState {
    pub active: Vec<InstanceId>,
    pub rounds: Vec<RoundRecord>,
    /// Set when a round selected nothing and the run stopped early.
    pub truncated: bool,
}

impl MultiRoundState {
    pub fn new(ids: Vec<InstanceId>) -> Self {
        let mut active = ids;
        active.sort();
        active.dedup();
        Self { active, rounds: Vec::new(), truncated: false }
    }

    pub fn completed(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_finished(&self, config: &RoundConfig) -> bool {
        self.truncated || self.rounds.len() >= config.rounds
    }

    /// Runs the next round; `None` once the run is finished.
    pub fn step<R: RoundRunner + ?Sized>(
        &mut self,
        runner: &mut R,
        config: &RoundConfig,
        clean_mask: Option<&BTreeMap<InstanceId, bool>>,
    ) -> Result<Option<RoundOutcome>, SelectionError> {
        if self.is_finished(config) {
            return Ok(None);
        }
        let round = self.rounds.len() + 1;
        if round > 1 && config.reset_model_per_round {
            runner.reset_model();
        }
        let input_stats = clean_mask
            .map(|m| selection_precision_recall(&self.active.iter().cloned().collect(), m, round))
            .transpose()?;
        let outcome = run_round(runner, &self.active, config, round, clean_mask)?;
        let output_stats =
            clean_mask.map(|m| selection_precision_recall(&outcome.result.selected_ids, m, round)).transpose()?;
        if outcome.result.empty_selection {
            self.truncated = true;
        } else {
            self.active = outcome.result.selected_ids.iter().cloned().collect();
        }
        self.rounds.push(RoundRecord {
            result: outcome.result.clone(),
            input_stats,
            output_stats,
            test_accuracy: outcome.test_accuracy,
        });
        Ok(Some(outcome))
    }

    /// Rows mirroring a per-round trend table: round `r` reports the set it
    /// trained on and the accuracy reached at its end.
    pub fn trend_rows(&self) -> Vec<TrendRow> {
        self.rounds
            .iter()
            .enumerate()
            .map(|(i, r)| TrendRow {
                round: i + 1,
                precision: r.input_stats.as_ref().and_then(|s| s.precision),
                recall: r.input_stats.as_ref().and_then(|s| s.recall),
                accuracy: r.test_accuracy,
            })
            .collect()
    }

    /// Per-round selection statistics.
    pub fn stats_rows(&self) -> Vec<RoundStatsRow> {
        self.rounds
            .iter()
            .enumerate()
            .map(|(i, r)| RoundStatsRow {
                round: i + 1,
                kept: r.result.selected_ids.len(),
                precision: r.output_stats.as_ref().and_then(|s| s.precision),
                recall: r.output_stats.as_ref().and_then(|s| s.recall),
                test_accuracy: r.test_accuracy,
                threshold: r.result.threshold,
                converged: r.result.fit.as_ref().map(|f| f.converged),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiRoundOutcome {
    /// Training set after the last completed round.
    pub final_ids: Vec<InstanceId>,
    pub state: MultiRoundState,
}

impl MultiRoundOutcome {
    pub fn truncated(&self) -> bool {
        self.state.truncated
    }
}

/// Runs `config.rounds` rounds, each training on the previous selection.
/// The runner keeps its model between rounds unless
/// `reset_model_per_round` is set.
pub fn run_multiround<R: RoundRunner + ?Sized>(
    runner: &mut R,
    ids: Vec<InstanceId>,
    config: &RoundConfig,
    clean_mask: Option<&BTreeMap<InstanceId, bool>>,
) -> Result<MultiRoundOutcome, SelectionError> {
    config.validate()?;
    let mut state = MultiRoundState::new(ids);
    while state.step(runner, config, clean_mask)?.is_some() {}
    Ok(MultiRoundOutcome { final_ids: state.active.clone(), state })
}

/// Runs the dynamics-mixture selector and the small-loss and ratio
/// baselines under identical settings, each with a fresh runner, and
/// reports final-round precision, recall and test accuracy.
pub fn compare_selectors<R, F>(
    mut make_runner: F,
    ids: &[InstanceId],
    config: &RoundConfig,
    baseline_ratio: f64,
    clean_mask: &BTreeMap<InstanceId, bool>,
) -> Result<Vec<ComparisonRow>, SelectionError>
where
    R: RoundRunner,
    F: FnMut() -> R,
{
    check_ratio(baseline_ratio)?;
    let arms = [
        ("dynamics_mixture", Strategy::MixtureThreshold),
        ("small_loss", Strategy::SmallLoss(baseline_ratio)),
        ("ratio", Strategy::Ratio(baseline_ratio)),
    ];
    arms.into_iter()
        .map(|(name, strategy)| {
            let cfg = RoundConfig { strategy, ..config.clone() };
            let mut runner = make_runner();
            let out = run_multiround(&mut runner, ids.to_vec(), &cfg, Some(clean_mask))?;
            let last = out.state.rounds.last();
            let stats = last.and_then(|r| r.output_stats.clone());
            Ok(ComparisonRow {
                method: name.to_string(),
                precision: stats.as_ref().and_then(|s| s.precision),
                recall: stats.as_ref().and_then(|s| s.recall),
                accuracy: last.and_then(|r| r.test_accuracy),
            })
        })
        .collect()
}

/// Replays fixed logs, one per round (the last repeats), restricted to the
/// active ids. Lets offline logs go through the same round machinery.
#[derive(Clone, Debug)]
pub struct LogReplay {
    pub logs: Vec<Vec<LogRecord>>,
}

impl RoundRunner for LogReplay {
    fn run_round(&mut self, round: usize, active: &[InstanceId], _epochs: usize) -> Result<RoundLog, SelectionError> {
        let log = self
            .logs
            .get(round - 1)
            .or(self.logs.last())
            .ok_or_else(|| SelectionError::InvalidConfig("no logs to replay".into()))?;
        let want: BTreeSet<&InstanceId> = active.iter().collect();
        let records = log.iter().filter(|r| want.contains(&r.id)).cloned().collect();
        Ok(RoundLog { records, validation_accuracy: None })
    }
}
