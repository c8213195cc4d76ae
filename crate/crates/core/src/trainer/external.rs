//! Runs an external training command once per round.
//!
//! The command is a shell template. Before each round the active ids are
//! written one per line to a file; the command must then write a prediction
//! log covering exactly those ids. Placeholders:
//!
//! | placeholder | value |
//! |-------------|-------|
//! | `{dataset}` | dataset path from the config |
//! | `{ids}`     | file listing the active ids |
//! | `{out}`     | where the command writes its log |
//! | `{epochs}`  | epochs for the round |
//! | `{round}`   | 1-based round index |
//! | `{seed}`    | configured seed |
//!
//! Path values are single-quoted for the shell.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use thiserror::Error;

use crate::id::InstanceId;
use crate::predlog::{read_log, validate_log, LogError};
use crate::selection::{RoundLog, RoundRunner, SelectionError};

#[derive(Debug, Error)]
pub enum ExternalError {
    #[error("could not start trainer command `{command}`: {source}")]
    Spawn { command: String, source: std::io::Error },
    #[error("trainer command exited with {}: {stderr}", .code.map_or("a signal".to_string(), |c| format!("code {c}")))]
    NonZeroExit { code: Option<i32>, stderr: String },
    #[error("trainer log {}: {source}", .path.display())]
    Log { path: PathBuf, source: LogError },
    #[error("trainer log {} was not written: {source}", .path.display())]
    MissingOutput { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct ExternalTrainer {
    pub command: String,
    pub dataset: PathBuf,
    /// Where id lists and logs are written, one pair per round.
    pub workdir: PathBuf,
    pub seed: u64,
}

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

impl ExternalTrainer {
    pub fn render(&self, ids: &Path, out: &Path, epochs: usize, round: usize) -> String {
        self.command
            .replace("{dataset}", &shell_quote(&self.dataset))
            .replace("{ids}", &shell_quote(ids))
            .replace("{out}", &shell_quote(out))
            .replace("{epochs}", &epochs.to_string())
            .replace("{round}", &round.to_string())
            .replace("{seed}", &self.seed.to_string())
    }

    pub fn run(&self, round: usize, active: &[InstanceId], epochs: usize) -> Result<RoundLog, ExternalError> {
        fs::create_dir_all(&self.workdir)?;
        let ids_path = self.workdir.join(format!("round{round}_ids.txt"));
        let out_path = self.workdir.join(format!("round{round}_log.jsonl"));
        let mut f = fs::File::create(&ids_path)?;
        for id in active {
            writeln!(f, "{id}")?;
        }
        f.flush()?;
        drop(f);
        if out_path.exists() {
            fs::remove_file(&out_path)?;
        }

        let command = self.render(&ids_path, &out_path, epochs, round);
        let output = Command::new("sh")
            .arg("-c")
            .arg(&command)
            .output()
            .map_err(|source| ExternalError::Spawn { command: command.clone(), source })?;
        if !output.status.success() {
            return Err(ExternalError::NonZeroExit {
                code: output.status.code(),
                stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
            });
        }

        let file = fs::File::open(&out_path)
            .map_err(|source| ExternalError::MissingOutput { path: out_path.clone(), source })?;
        let log_err = |source| ExternalError::Log { path: out_path.clone(), source };
        let records = read_log(BufReader::new(file)).map_err(log_err)?;
        validate_log(&records, active, epochs).map_err(log_err)?;
        Ok(RoundLog { records, validation_accuracy: None })
    }
}

impl RoundRunner for ExternalTrainer {
    fn run_round(&mut self, round: usize, active: &[InstanceId], epochs: usize) -> Result<RoundLog, SelectionError> {
        Ok(self.run(round, active, epochs)?)
    }
}
