//! Experiment configuration, read from TOML.
//!
//! ```toml
//! output_dir = "out/blobs40"
//!
//! [dataset]
//! source = "blobs"          # or "csv" with `path` (and optional `n_classes`)
//! n_classes = 4
//! per_class = 500
//! test_per_class = 125
//! dim = 8
//! spread = 0.3
//! seed = 1
//!
//! [noise]
//! kind = "symmetric"        # "none", "symmetric", "asymmetric"
//! ratio = 0.4
//! seed = 101
//!
//! [trainer]
//! kind = "in_process"       # or "external" with `command` and `dataset`
//! learning_rate = 0.01
//! seed = 1
//!
//! [rounds]
//! epochs = 30
//! rounds = 3
//! strategy = "mixture_threshold"   # or { ratio = 0.9 } / { small_loss = 0.9 }
//!
//! [fit]
//! tol = 1e-6
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dynasel::mixture::FitConfig;
use dynasel::selection::RoundConfig;
use dynasel::trainer::data::{make_blobs, BlobSpec, ToyDataset};
use dynasel::trainer::model::TrainerConfig;
use dynasel::trainer::noise::{circular_map, inject_asymmetric_noise, inject_symmetric_noise};
use dynasel::trainer::simulate::DynamicsModel;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Overridable with `--output-dir`.
    pub output_dir: Option<PathBuf>,
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub trainer: Option<TrainerSpec>,
    #[serde(default)]
    pub rounds: RoundConfig,
    #[serde(default)]
    pub fit: FitConfig,
    pub simulate: Option<SimulateSpec>,
    #[serde(default)]
    pub report: ReportSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    Blobs(BlobSpec),
    Csv { path: PathBuf, n_classes: Option<usize> },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    #[default]
    None,
    Symmetric {
        ratio: f64,
        seed: u64,
    },
    Asymmetric {
        ratio: f64,
        seed: u64,
        class_map: ClassMapSpec,
    },
}

/// `"circular"` or a table of `source = target` class pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassMapSpec {
    Named(String),
    Pairs(BTreeMap<String, usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainerSpec {
    InProcess {
        #[serde(flatten)]
        config: TrainerConfig,
        /// Record per-epoch test accuracy (needed for best-validation small-loss).
        #[serde(default)]
        track_validation: bool,
    },
    External {
        /// Shell template; see the library's external trainer docs.
        command: String,
        dataset: PathBuf,
        seed: u64,
        /// Ground-truth labels for evaluation, if the log lacks them.
        truth: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    pub n_clean: usize,
    pub n_noisy: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub model: DynamicsModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSpec {
    pub bins: usize,
    /// Keep-ratio of the small-loss and ratio baselines in comparisons.
    pub baseline_ratio: f64,
}

impl Default for ReportSpec {
    fn default() -> Self {
        Self { bins: 40, baseline_ratio: 0.9 }
    }
}

/// Sections whose randomness must be seeded in the file itself.
fn check_explicit_seeds(raw: &toml::Table) -> Result<(), CliError> {
    let needs_seed = |section: &str, applies: &dyn Fn(&toml::Table) -> bool| -> Result<(), CliError> {
        match raw.get(section).and_then(|v| v.as_table()) {
            Some(t) if applies(t) && !t.contains_key("seed") => {
                Err(CliError::Config(format!("[{section}] needs an explicit seed")))
            }
            _ => Ok(()),
        }
    };
    let key_is = |key: &'static str, value: &'static str| {
        move |t: &toml::Table| t.get(key).and_then(|v| v.as_str()) == Some(value)
    };
    needs_seed("dataset", &key_is("source", "blobs"))?;
    needs_seed("noise", &|t: &toml::Table| t.get("kind").and_then(|v| v.as_str()) != Some("none"))?;
    needs_seed("trainer", &|_: &toml::Table| true)?;
    needs_seed("simulate", &|_: &toml::Table| true)?;
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        check_explicit_seeds(&raw)?;
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.rounds.fit != FitConfig::default() {
            return Err(CliError::Config("mixture settings belong under [fit], not [rounds.fit]".into()));
        }
        cfg.rounds.fit = cfg.fit.clone();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Copy written next to results; `output_dir` is left out since the
    /// copy lives in it.
    pub fn to_toml(&self) -> String {
        let mut copy = self.clone();
        copy.output_dir = None;
        copy.rounds.fit = FitConfig::default();
        toml::to_string(&copy).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.rounds.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(TrainerSpec::InProcess { config, .. }) = &self.trainer {
            config.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        if let Some(sim) = &self.simulate {
            sim.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
            if sim.epochs == 0 || sim.n_clean + sim.n_noisy == 0 {
                return Err(CliError::Config("[simulate] needs epochs >= 1 and at least one instance".into()));
            }
        }
        if self.report.bins < 2 {
            return Err(CliError::Config("[report] bins must be at least 2".into()));
        }
        if !(self.report.baseline_ratio > 0.0 && self.report.baseline_ratio <= 1.0) {
            return Err(CliError::Config("[report] baseline_ratio must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Same experiment with every seed moved by `offset`.
    pub fn with_seed_offset(&self, offset: u64) -> Self {
        let mut c = self.clone();
        if let Some(DatasetSpec::Blobs(b)) = &mut c.dataset {
            b.seed += offset;
        }
        match &mut c.noise {
            NoiseSpec::Symmetric { seed, .. } | NoiseSpec::Asymmetric { seed, .. } => *seed += offset,
            NoiseSpec::None => {}
        }
        match &mut c.trainer {
            Some(TrainerSpec::InProcess { config, .. }) => config.seed += offset,
            Some(TrainerSpec::External { seed, .. }) => *seed += offset,
            None => {}
        }
        if let Some(s) = &mut c.simulate {
            s.seed += offset;
        }
        c
    }

    pub fn output_dir(&self) -> Result<&Path, CliError> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| CliError::Config("no output_dir (set it in the config or pass --output-dir)".into()))
    }

    pub fn trainer(&self) -> Result<&TrainerSpec, CliError> {
        self.trainer.as_ref().ok_or_else(|| CliError::Config("no [trainer] section".into()))
    }

    /// Loads the dataset source; noise is not applied.
    pub fn base_dataset(&self) -> Result<ToyDataset, CliError> {
        match &self.dataset {
            None => Err(CliError::Config("no [dataset] section".into())),
            Some(DatasetSpec::Blobs(spec)) => make_blobs(spec).map_err(|e| CliError::Config(e.to_string())),
            Some(DatasetSpec::Csv { path, n_classes }) => {
                let file =
                    fs::File::open(path).map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
                ToyDataset::read_csv(file, *n_classes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
            }
        }
    }

    /// Dataset with the configured noise applied.
    pub fn dataset(&self) -> Result<ToyDataset, CliError> {
        let ds = self.base_dataset()?;
        let noisy = match &self.noise {
            NoiseSpec::None => Ok(ds),
            NoiseSpec::Symmetric { ratio, seed } => inject_symmetric_noise(&ds, *ratio, *seed),
            NoiseSpec::Asymmetric { ratio, seed, class_map } => {
                let map = match class_map {
                    ClassMapSpec::Named(name) if name == "circular" => circular_map(ds.n_classes),
                    ClassMapSpec::Named(name) => {
                        return Err(CliError::Config(format!(
                            "unknown class map {name:?}; use \"circular\" or a table"
                        )))
                    }
                    ClassMapSpec::Pairs(pairs) => pairs
                        .iter()
                        .map(|(k, &v)| {
                            k.parse::<usize>()
                                .map(|s| (s, v))
                                .map_err(|_| CliError::Config(format!("class map key {k:?} is not a class index")))
                        })
                        .collect::<Result<_, _>>()?,
                };
                inject_asymmetric_noise(&ds, *ratio, &map, *seed)
            }
        };
        noisy.map_err(|e| CliError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dynasel::selection::Strategy;
    use dynasel::trainer::model::Arch;

    const FULL: &str = r#"
output_dir = "out"

[dataset]
source = "blobs"
n_classes = 3
per_class = 20
test_per_class = 5
dim = 2
spread = 0.2
seed = 1

[noise]
kind = "asymmetric"
ratio = 0.5
seed = 2
class_map = { 0 = 1, 1 = 2 }

[trainer]
kind = "in_process"
learning_rate = 0.05
arch = { mlp = { hidden = 16 } }
seed = 3

[rounds]
epochs = 12
rounds = 2
strategy = { ratio = 0.8 }

[fit]
tol = 1e-7
"#;

    #[test]
    fn parses_every_section() {
        let cfg = ExperimentConfig::parse(FULL).unwrap();
        assert_eq!(cfg.rounds.strategy, Strategy::Ratio(0.8));
        assert_eq!(cfg.rounds.fit.tol, 1e-7);
        match cfg.trainer.as_ref().unwrap() {
            TrainerSpec::InProcess { config, .. } => {
                assert_eq!(config.arch, Arch::Mlp { hidden: 16 });
                assert_eq!(config.seed, 3);
                assert_eq!(config.batch_size, 128);
            }
            other => panic!("{other:?}"),
        }
        let ds = cfg.dataset().unwrap();
        assert_eq!(ds.noise_ratio(), 20.0 / 60.0);
        let copy = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(ExperimentConfig { output_dir: cfg.output_dir.clone(), ..copy }, cfg);
    }

    #[test]
    fn seeds_must_be_explicit() {
        let text = FULL.replace("seed = 3\n", "");
        assert!(matches!(ExperimentConfig::parse(&text), Err(CliError::Config(m)) if m.contains("[trainer]")));
        let text = FULL.replace("seed = 1\n", "");
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn rejects_bad_values() {
        for (from, to) in [
            ("epochs = 12", "epochs = 0"),
            ("{ ratio = 0.8 }", "{ ratio = 1.5 }"),
            ("source = \"blobs\"", "source = \"parquet\""),
            ("output_dir", "outptu_dir"),
            ("rounds = 2", "roundz = 2"),
            ("tol = 1e-7", "tol = -1.0"),
        ] {
            assert!(matches!(ExperimentConfig::parse(&FULL.replace(from, to)), Err(CliError::Config(_))), "{to}");
        }
    }

    #[test]
    fn seed_offset_moves_every_seed() {
        let cfg = ExperimentConfig::parse(FULL).unwrap().with_seed_offset(10);
        match (&cfg.dataset, &cfg.noise, &cfg.trainer) {
            (
                Some(DatasetSpec::Blobs(b)),
                NoiseSpec::Asymmetric { seed, .. },
                Some(TrainerSpec::InProcess { config, .. }),
            ) => {
                assert_eq!((b.seed, *seed, config.seed), (11, 12, 13))
            }
            other => panic!("{other:?}"),
        }
    }
}
