//! Synthetic learning dynamics: each instance follows a two-state Markov
//! chain (misclassified / memorized) with per-population transition
//! probabilities, skipping the cost of training a model.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainerError;
use crate::dynamics::PredictionSequence;
use crate::id::InstanceId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsModel {
    pub p_memorize_clean: f64,
    pub p_forget_clean: f64,
    pub p_memorize_noisy: f64,
    pub p_forget_noisy: f64,
    /// Per-epoch multiplier on `p_memorize_noisy`; the last entry repeats.
    /// Models noisy labels being memorized late in training.
    pub ramp: Option<Vec<f64>>,
}

impl Default for DynamicsModel {
    fn default() -> Self {
        Self { p_memorize_clean: 0.35, p_forget_clean: 0.02, p_memorize_noisy: 0.08, p_forget_noisy: 0.30, ramp: None }
    }
}

impl DynamicsModel {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let probs = [self.p_memorize_clean, self.p_forget_clean, self.p_memorize_noisy, self.p_forget_noisy];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(TrainerError::InvalidConfig(format!("transition probabilities {probs:?} not in [0, 1]")));
        }
        if self.p_memorize_clean < self.p_memorize_noisy || self.p_forget_clean > self.p_forget_noisy {
            return Err(TrainerError::InvalidConfig(
                "clean instances must memorize at least as easily and forget at most as easily as noisy ones".into(),
            ));
        }
        if let Some(r) = &self.ramp {
            if r.is_empty() || r.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
                return Err(TrainerError::InvalidConfig(
                    "ramp must be a nonempty list of nonnegative multipliers".into(),
                ));
            }
        }
        Ok(())
    }

    fn noisy_memorize_at(&self, epoch: usize) -> f64 {
        let m = self.ramp.as_ref().map_or(1.0, |r| r.get(epoch).or(r.last()).copied().unwrap_or(1.0));
        (self.p_memorize_noisy * m).min(1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedRound {
    pub sequences: Vec<PredictionSequence>,
    pub clean_mask: BTreeMap<InstanceId, bool>,
}

/// Instances `0..n_clean` are clean, the next `n_noisy` are noisy. Every
/// chain starts misclassified; the state is recorded, then transitions.
pub fn simulate_dynamics(
    n_clean: usize,
    n_noisy: usize,
    model: &DynamicsModel,
    epochs: usize,
    seed: u64,
) -> Result<SimulatedRound, TrainerError> {
    model.validate()?;
    if epochs == 0 {
        return Err(TrainerError::InvalidConfig("epochs must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::with_capacity(n_clean + n_noisy);
    let mut clean_mask = BTreeMap::new();
    for i in 0..n_clean + n_noisy {
        let clean = i < n_clean;
        let id = InstanceId::from(i);
        let mut seq = PredictionSequence::new(id.clone(), epochs);
        let mut memorized = false;
        for e in 0..epochs {
            seq.push(u8::from(memorized)).expect("within capacity");
            let p = match (clean, memorized) {
                (true, false) => model.p_memorize_clean,
                (true, true) => model.p_forget_clean,
                (false, false) => model.noisy_memorize_at(e),
                (false, true) => model.p_forget_noisy,
            };
            if rng.random::<f64>() < p {
                memorized = !memorized;
            }
        }
        sequences.push(seq);
        clean_mask.insert(id, clean);
    }
    Ok(SimulatedRound { sequences, clean_mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{metric_simplified, segment};

    #[test]
    fn deterministic_clean_chain() {
        let model = DynamicsModel { p_memorize_clean: 1.0, p_forget_clean: 0.0, ..Default::default() };
        let sim = simulate_dynamics(20, 0, &model, 12, 1).unwrap();
        for s in &sim.sequences {
            let mut expected = vec![1u8; 12];
            expected[0] = 0;
            assert_eq!(s.bits(), expected.as_slice());
            let c = metric_simplified(&segment(s.bits()).unwrap(), 1.0);
            assert_eq!(c, 1.0 - 11.0);
        }
    }

    #[test]
    fn never_memorizing_noisy_chain() {
        let model = DynamicsModel { p_memorize_noisy: 0.0, ..Default::default() };
        let sim = simulate_dynamics(0, 30, &model, 9, 1).unwrap();
        for s in &sim.sequences {
            assert_eq!(s.bits(), [0u8; 9].as_slice());
            assert_eq!(metric_simplified(&segment(s.bits()).unwrap(), 1.0), 9.0);
        }
        assert!(sim.clean_mask.values().all(|c| !c));
    }

    #[test]
    fn seeded_and_shaped() {
        let a = simulate_dynamics(50, 50, &DynamicsModel::default(), 7, 3).unwrap();
        let b = simulate_dynamics(50, 50, &DynamicsModel::default(), 7, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sequences.len(), 100);
        assert!(a.sequences.iter().all(|s| s.len() == 7));
        let c = simulate_dynamics(50, 50, &DynamicsModel::default(), 7, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn ramp_raises_late_memorization() {
        let flat = DynamicsModel::default();
        let ramped = DynamicsModel { ramp: Some(vec![1.0, 1.0, 1.0, 4.0]), ..Default::default() };
        let ones = |m: &DynamicsModel| -> usize {
            simulate_dynamics(0, 2000, m, 30, 8)
                .unwrap()
                .sequences
                .iter()
                .map(|s| s.bits().iter().filter(|&&b| b == 1).count())
                .sum()
        };
        assert!(ones(&ramped) > ones(&flat));
    }

    #[test]
    fn invalid_models_are_rejected() {
        let bad = DynamicsModel { p_forget_noisy: 1.5, ..Default::default() };
        assert!(simulate_dynamics(1, 1, &bad, 3, 0).is_err());
        let inverted = DynamicsModel { p_memorize_clean: 0.01, ..Default::default() };
        assert!(simulate_dynamics(1, 1, &inverted, 3, 0).is_err());
        assert!(simulate_dynamics(1, 1, &DynamicsModel::default(), 0, 0).is_err());
    }
}
