use std::path::Path;

use dynasel::evaluation::selection_precision_recall;
use dynasel::predlog::LogRecord;
use dynasel::selection::{select_from_log, RoundConfig, RoundLog, Strategy};
use dynasel::trainer::simulate::simulate_dynamics;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::{
    clean_mask_csv, read_ids, read_log_file, read_truth, to_json, write_file, write_log_file, write_selection,
};

pub fn simulate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let spec = cfg.simulate.as_ref().ok_or_else(|| CliError::Config("no [simulate] section".into()))?;
    let out = cfg.output_dir()?;
    let sim = simulate_dynamics(spec.n_clean, spec.n_noisy, &spec.model, spec.epochs, spec.seed)?;
    // Clean instances carry their own label; noisy ones a different true label.
    let records: Vec<LogRecord> = sim
        .sequences
        .iter()
        .map(|s| LogRecord {
            id: s.id.clone(),
            label: 0,
            true_label: Some(usize::from(!sim.clean_mask[&s.id])),
            seq: s.bits().to_vec(),
            losses: None,
        })
        .collect();
    write_file(&out.join("config.toml"), cfg.to_toml())?;
    write_log_file(&out.join("simulated_log.jsonl"), &records)?;
    write_file(&out.join("clean_mask.csv"), clean_mask_csv(&sim.clean_mask))?;
    eprintln!("simulated {} sequences of {} epochs into {}", records.len(), spec.epochs, out.display());
    Ok(())
}

pub fn inject_noise(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = cfg.output_dir()?;
    let ds = cfg.dataset()?;
    let mut buf = Vec::new();
    ds.write_csv(&mut buf)?;
    write_file(&out.join("config.toml"), cfg.to_toml())?;
    write_file(&out.join("dataset.csv"), buf)?;
    eprintln!("wrote {} rows, training noise ratio {:.4}", ds.len(), ds.noise_ratio());
    Ok(())
}

pub struct SelectArgs<'a> {
    pub log: &'a Path,
    pub truth: Option<&'a Path>,
    pub round: usize,
}

/// Offline selection from any trainer's log. The epoch count comes from
/// the log itself.
pub fn select(cfg: &ExperimentConfig, args: &SelectArgs) -> Result<(), CliError> {
    let out = cfg.output_dir()?;
    let records = read_log_file(args.log)?;
    let epochs = records
        .first()
        .map(|r| r.seq.len())
        .ok_or_else(|| CliError::Data(format!("{}: log has no records", args.log.display())))?;
    let rounds = RoundConfig { epochs, ..cfg.rounds.clone() };
    let mask = match args.truth {
        Some(path) => Some(read_truth(path)?),
        None => dynasel::predlog::clean_mask(&records),
    };
    let log = RoundLog { records, validation_accuracy: None };
    let result = select_from_log(&log, &rounds, args.round, mask.as_ref())?;
    write_selection(out, &result, rounds.fit.threshold_rule)?;
    let kind = match (&result.fallback, result.strategy) {
        (Some(_), _) => "ratio fallback",
        (None, Strategy::MixtureThreshold) => "mixture threshold",
        (None, s) => s.name(),
    };
    eprintln!("kept {} of {} ({kind})", result.selected_ids.len(), result.metric_scores.len());
    Ok(())
}

pub fn eval(selected: &Path, truth: &Path, round: usize, out: Option<&Path>) -> Result<(), CliError> {
    let ids = read_ids(selected)?;
    let mask = read_truth(truth)?;
    let stats = selection_precision_recall(&ids, &mask, round).map_err(|e| CliError::Data(e.to_string()))?;
    let text = to_json(&stats);
    match out {
        Some(path) => write_file(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
