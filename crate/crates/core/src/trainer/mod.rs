//! Training backends that produce prediction logs: an in-process trainer
//! for small tabular datasets, a simulator, and an external-command bridge.

pub mod data;
pub mod external;
pub mod model;
pub mod noise;
pub mod simulate;

use std::collections::HashMap;

use thiserror::Error;

use crate::dynamics::record_status;
use crate::evaluation::test_accuracy;
use crate::id::InstanceId;
use crate::predlog::LogRecord;
use crate::selection::{RoundLog, RoundRunner, SelectionError};
use data::{Split, ToyDataset};
use model::{cosine_lr, train_epoch, Model, TrainerConfig};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid noise spec: {0}")]
    InvalidNoise(String),
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("model expects dim {}/{} classes, data has dim {}/{} classes", .model.0, .model.1, .data.0, .data.1)]
    ShapeMismatch { model: (usize, usize), data: (usize, usize) },
    #[error("non-finite loss {loss} in batch {batch} at row {row}")]
    NonFiniteLoss { batch: usize, row: String, loss: f64 },
    #[error("id {0} is not a training row")]
    UnknownId(InstanceId),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Trains a [`Model`] on the active subset of a [`ToyDataset`], one round
/// at a time. The model carries over between rounds; the momentum buffers
/// do not.
#[derive(Clone, Debug)]
pub struct InProcessTrainer {
    pub dataset: ToyDataset,
    pub config: TrainerConfig,
    pub model: Model,
    /// Measure test-split accuracy after every epoch.
    pub track_validation: bool,
    index: HashMap<InstanceId, usize>,
}

impl InProcessTrainer {
    pub fn new(dataset: ToyDataset, config: TrainerConfig) -> Result<Self, TrainerError> {
        dataset.validate()?;
        config.validate()?;
        let model = Model::new(config.arch, dataset.dim(), dataset.n_classes, config.seed);
        let index = dataset.index_of();
        Ok(Self { dataset, config, model, track_validation: false, index })
    }

    fn epoch_seed(&self, round: usize, epoch: usize) -> u64 {
        self.config
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((round as u64) << 32)
            .wrapping_add(epoch as u64)
    }

    /// Trains `epochs` epochs on `active` with a cosine schedule and
    /// returns each instance's status before every update.
    pub fn train_round(
        &mut self,
        round: usize,
        active: &[InstanceId],
        epochs: usize,
    ) -> Result<RoundLog, TrainerError> {
        let rows = active
            .iter()
            .map(|id| match self.index.get(id) {
                Some(&r) if self.dataset.splits[r] == Split::Train => Ok(r),
                _ => Err(TrainerError::UnknownId(id.clone())),
            })
            .collect::<Result<Vec<_>, _>>()?;

        self.model.reset_momentum();
        let mut seqs = vec![Vec::with_capacity(epochs); rows.len()];
        let mut losses = vec![Vec::with_capacity(epochs); rows.len()];
        let mut val = self.track_validation.then(Vec::new);
        for e in 0..epochs {
            let lr = cosine_lr(self.config.learning_rate, e, epochs);
            let shuffle = self.epoch_seed(round, e);
            let out = train_epoch(&mut self.model, &self.dataset, &rows, &self.config, lr, shuffle)?;
            for (k, &row) in rows.iter().enumerate() {
                seqs[k].push(record_status(out.predictions[k], self.dataset.observed_labels[row]));
                losses[k].push(out.losses[k]);
            }
            if let Some(v) = val.as_mut() {
                v.push(test_accuracy(&self.model, &self.dataset).unwrap_or(f64::NAN));
            }
        }

        let records = rows
            .iter()
            .zip(seqs.into_iter().zip(losses))
            .map(|(&row, (seq, l))| LogRecord {
                id: self.dataset.ids[row].clone(),
                label: self.dataset.observed_labels[row],
                true_label: Some(self.dataset.true_labels[row]),
                seq,
                losses: Some(l),
            })
            .collect();
        Ok(RoundLog { records, validation_accuracy: val })
    }
}

impl RoundRunner for InProcessTrainer {
    fn run_round(&mut self, round: usize, active: &[InstanceId], epochs: usize) -> Result<RoundLog, SelectionError> {
        Ok(self.train_round(round, active, epochs)?)
    }

    fn reset_model(&mut self) {
        self.model = Model::new(self.config.arch, self.dataset.dim(), self.dataset.n_classes, self.config.seed);
    }

    fn test_accuracy(&self) -> Option<f64> {
        test_accuracy(&self.model, &self.dataset).ok()
    }
}
