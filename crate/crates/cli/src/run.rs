//! Multi-round experiments with checkpointing, trials and reports.
//!
//! Output layout:
//!
//! ```text
//! config.toml  clean_mask.csv  state.json  model.json
//! trend.csv  round_stats.csv  comparison.csv (with --compare)
//! round_<r>/  log.jsonl  selected_ids.txt  scores.csv  mixture.json
//!             histogram.csv  overlay.json
//! ```
//!
//! `state.json` is rewritten after every round; a later `run` on the same
//! directory continues from it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dynasel::evaluation::{comparison_csv, histogram_export, mean_std, round_stats_csv, round_trend_report};
use dynasel::selection::{compare_selectors, MultiRoundState, RoundRunner};
use dynasel::trainer::external::ExternalTrainer;
use dynasel::trainer::model::Model;
use dynasel::trainer::InProcessTrainer;
use dynasel::InstanceId;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TrainerSpec};
use crate::error::CliError;
use crate::output::{
    clean_mask_csv, read_clean_mask, remove_if_present, to_json, write_atomic, write_file, write_log_file,
    write_selection,
};

pub const STATE_FILE: &str = "state.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config: ExperimentConfig,
    pub state: MultiRoundState,
    /// In-process model after the last completed round.
    pub model: Option<Model>,
    pub clean_mask: Option<BTreeMap<InstanceId, bool>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub fresh: bool,
    pub compare: bool,
}

/// Settings that may change between an interrupted run and its resumption.
fn resumable_view(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.output_dir = None;
    c.rounds.rounds = 0;
    c.report = Default::default();
    c
}

fn load_state(dir: &Path) -> Result<Option<RunState>, CliError> {
    let path = dir.join(STATE_FILE);
    match fs::read_to_string(&path) {
        Ok(text) => {
            serde_json::from_str(&text).map(Some).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(CliError::io(path.display(), e)),
    }
}

pub fn round_dir(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("round_{round}"))
}

enum Runner {
    InProcess(Box<InProcessTrainer>),
    External(ExternalTrainer),
}

impl Runner {
    fn as_dyn(&mut self) -> &mut dyn RoundRunner {
        match self {
            Runner::InProcess(t) => t.as_mut(),
            Runner::External(t) => t,
        }
    }

    fn model(&self) -> Option<&Model> {
        match self {
            Runner::InProcess(t) => Some(&t.model),
            Runner::External(_) => None,
        }
    }
}

struct Setup {
    runner: Runner,
    ids: Vec<InstanceId>,
    mask: Option<BTreeMap<InstanceId, bool>>,
    template: Option<InProcessTrainer>,
}

fn setup(cfg: &ExperimentConfig, dir: &Path) -> Result<Setup, CliError> {
    match cfg.trainer()? {
        TrainerSpec::InProcess { config, track_validation } => {
            let ds = cfg.dataset()?;
            let ids = ds.train_ids();
            let mask = Some(ds.clean_mask());
            let mut trainer = InProcessTrainer::new(ds, config.clone())?;
            trainer.track_validation = *track_validation;
            Ok(Setup { runner: Runner::InProcess(Box::new(trainer.clone())), ids, mask, template: Some(trainer) })
        }
        TrainerSpec::External { command, dataset, seed, truth } => {
            let truth = truth.as_deref().map(read_clean_mask).transpose()?;
            let (ids, mask) = match (&cfg.dataset, truth) {
                (Some(_), truth) => {
                    let ds = cfg.dataset()?;
                    (ds.train_ids(), truth.or_else(|| Some(ds.clean_mask())))
                }
                (None, Some(truth)) => (truth.keys().cloned().collect(), Some(truth)),
                (None, None) => {
                    return Err(CliError::Config(
                        "an external trainer needs [dataset] or a truth file for the ids".into(),
                    ))
                }
            };
            let runner = ExternalTrainer {
                command: command.clone(),
                dataset: dataset.clone(),
                workdir: dir.join("external"),
                seed: *seed,
            };
            Ok(Setup { runner: Runner::External(runner), ids, mask, template: None })
        }
    }
}

/// Final-round summary of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub kept: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub test_accuracy: Option<f64>,
}

pub fn run(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunSummary, CliError> {
    let dir = cfg.output_dir()?.to_path_buf();
    let Setup { mut runner, ids, mask, template } = setup(cfg, &dir)?;

    let mut state = MultiRoundState::new(ids.clone());
    if let Some(saved) = load_state(&dir)?.filter(|_| !opts.fresh) {
        if resumable_view(&saved.config) != resumable_view(cfg) {
            return Err(CliError::Config(format!(
                "{} holds a run with a different config; pass --fresh to start over",
                dir.join(STATE_FILE).display()
            )));
        }
        if let (Runner::InProcess(t), Some(model)) = (&mut runner, saved.model) {
            t.model = model;
        }
        state = saved.state;
        if state.completed() > 0 {
            eprintln!("resuming after round {}", state.completed());
        }
    }

    write_file(&dir.join("config.toml"), cfg.to_toml())?;
    if let Some(m) = &mask {
        write_file(&dir.join("clean_mask.csv"), clean_mask_csv(m))?;
    }
    let portable = ExperimentConfig { output_dir: None, ..cfg.clone() };
    let checkpoint = |state: &MultiRoundState, model: Option<&Model>| {
        let saved = RunState {
            config: portable.clone(),
            state: state.clone(),
            model: model.cloned(),
            clean_mask: mask.clone(),
        };
        write_atomic(&dir.join(STATE_FILE), to_json(&saved))
    };

    while let Some(outcome) = state.step(runner.as_dyn(), &cfg.rounds, mask.as_ref())? {
        let r = state.completed();
        let rdir = round_dir(&dir, r);
        write_log_file(&rdir.join("log.jsonl"), &outcome.log.records)?;
        write_selection(&rdir, &outcome.result, cfg.rounds.fit.threshold_rule)?;
        checkpoint(&state, runner.model())?;
        let how = outcome.result.fallback.as_ref().map_or("", |_| " (ratio fallback)");
        eprintln!(
            "round {r}: kept {} of {}{how}",
            outcome.result.selected_ids.len(),
            outcome.result.metric_scores.len()
        );
    }
    checkpoint(&state, runner.model())?;
    // Rounds left over from an earlier, longer run in this directory.
    let mut stale = state.completed() + 1;
    while round_dir(&dir, stale).is_dir() {
        let d = round_dir(&dir, stale);
        fs::remove_dir_all(&d).map_err(|e| CliError::io(d.display(), e))?;
        stale += 1;
    }
    if let Some(model) = runner.model() {
        write_file(&dir.join("model.json"), to_json(model))?;
    }

    if opts.compare {
        let (Some(template), Some(mask)) = (&template, &mask) else {
            return Err(CliError::Config("--compare needs the in-process trainer".into()));
        };
        let rows = compare_selectors(|| template.clone(), &ids, &cfg.rounds, cfg.report.baseline_ratio, mask)?;
        write_file(&dir.join("comparison.csv"), comparison_csv(&rows))?;
    }

    let saved = RunState { config: cfg.clone(), state, model: None, clean_mask: mask };
    write_reports(&dir, &saved)?;
    let last = saved.state.rounds.last();
    let stats = last.and_then(|r| r.output_stats.as_ref());
    Ok(RunSummary {
        kept: saved.state.active.len(),
        precision: stats.and_then(|s| s.precision),
        recall: stats.and_then(|s| s.recall),
        test_accuracy: last.and_then(|r| r.test_accuracy),
    })
}

/// Runs `n` seed-shifted copies of the experiment side by side, each in
/// `trial_<t>/`, and writes `trials_summary.csv`.
pub fn run_trials(cfg: &ExperimentConfig, n: usize, opts: RunOptions) -> Result<(), CliError> {
    let dir = cfg.output_dir()?.to_path_buf();
    let configs: Vec<ExperimentConfig> = (0..n)
        .map(|t| {
            let mut c = cfg.with_seed_offset(t as u64);
            c.output_dir = Some(dir.join(format!("trial_{t}")));
            c
        })
        .collect();
    let results: Vec<Result<RunSummary, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || run(c, opts))).collect();
        handles.into_iter().map(|h| h.join().expect("trial thread panicked")).collect()
    });
    let summaries = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    let mut out = String::from("trial,kept,precision,recall,test_accuracy\n");
    for (t, s) in summaries.iter().enumerate() {
        out.push_str(&format!("{t},{},{},{},{}\n", s.kept, fmt(s.precision), fmt(s.recall), fmt(s.test_accuracy)));
    }
    let column = |f: &dyn Fn(&RunSummary) -> Option<f64>| -> Option<(f64, f64)> {
        let values: Option<Vec<f64>> = summaries.iter().map(f).collect();
        values.and_then(|v| mean_std(&v))
    };
    let cols = [
        column(&|s| Some(s.kept as f64)),
        column(&|s| s.precision),
        column(&|s| s.recall),
        column(&|s| s.test_accuracy),
    ];
    for (label, pick) in [("mean", 0), ("std", 1)] {
        let cells: Vec<String> = cols.iter().map(|c| fmt(c.map(|ms| if pick == 0 { ms.0 } else { ms.1 }))).collect();
        out.push_str(&format!("{label},{}\n", cells.join(",")));
    }
    write_file(&dir.join("config.toml"), cfg.to_toml())?;
    write_file(&dir.join("trials_summary.csv"), out)
}

/// Trend table, per-round statistics and histogram exports of a run.
pub fn write_reports(dir: &Path, saved: &RunState) -> Result<(), CliError> {
    let state = &saved.state;
    write_file(&dir.join("trend.csv"), round_trend_report(&state.trend_rows()))?;
    write_file(&dir.join("round_stats.csv"), round_stats_csv(&state.stats_rows()))?;
    let rule = saved.config.rounds.fit.threshold_rule;
    for (i, round) in state.rounds.iter().enumerate() {
        let rdir = round_dir(dir, i + 1);
        let result = &round.result;
        let hist = histogram_export(
            &result.metric_scores,
            saved.clean_mask.as_ref(),
            saved.config.report.bins,
            result.fit.as_ref(),
            rule,
        )
        .map_err(|e| CliError::Data(e.to_string()))?;
        write_file(&rdir.join("histogram.csv"), hist.to_csv())?;
        let overlay = rdir.join("overlay.json");
        match &hist.overlay {
            Some(o) => write_file(&overlay, to_json(o))?,
            None => remove_if_present(&overlay)?,
        }
    }
    Ok(())
}

/// Regenerates the reports of a finished or interrupted run directory.
pub fn report(dir: &Path, bins: Option<usize>) -> Result<(), CliError> {
    let mut saved = load_state(dir)?.ok_or_else(|| CliError::Data(format!("{} has no {STATE_FILE}", dir.display())))?;
    if let Some(b) = bins {
        saved.config.report.bins = b;
    }
    saved.config.validate()?;
    write_reports(dir, &saved)
}
