//! Per-instance learning dynamics.
//!
//! Each training instance carries a binary sequence with one entry per
//! epoch of the current round: `1` when the model's argmax prediction
//! matched the (possibly noisy) dataset label, `0` otherwise. The sequence
//! is cut into maximal runs; the mean length of the misclassified runs
//! measures how hard the instance is to memorize, the mean length of the
//! memorized runs how hard it is to forget. Lower combined scores indicate
//! likely-clean instances.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::id::InstanceId;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("no epochs recorded for the sequence")]
    EmptySequence,
    #[error("status value {0} is not 0 or 1")]
    InvalidStatus(u8),
    #[error("sequence already holds {capacity} epochs; cannot record more this round")]
    CapacityExceeded { capacity: usize },
}

/// Learning status of one instance at one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Misclassified,
    Memorized,
}

impl Status {
    pub fn from_bit(bit: u8) -> Result<Self, DynamicsError> {
        match bit {
            0 => Ok(Status::Misclassified),
            1 => Ok(Status::Memorized),
            other => Err(DynamicsError::InvalidStatus(other)),
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Status::Misclassified => 0,
            Status::Memorized => 1,
        }
    }
}

/// Status bit for one instance: 1 iff the prediction equals the observed
/// label. Must be taken before the gradient step of the epoch.
pub fn record_status(predicted_label: usize, observed_label: usize) -> u8 {
    u8::from(predicted_label == observed_label)
}

/// Epoch-wise status record of one instance within one round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSequence {
    pub id: InstanceId,
    bits: Vec<u8>,
    capacity: usize,
}

impl PredictionSequence {
    /// Empty sequence for a round of `epochs` epochs.
    pub fn new(id: InstanceId, epochs: usize) -> Self {
        Self { id, bits: Vec::with_capacity(epochs), capacity: epochs }
    }

    /// A complete sequence, e.g. read back from a prediction log.
    pub fn from_bits(id: InstanceId, bits: Vec<u8>) -> Result<Self, DynamicsError> {
        if let Some(&bad) = bits.iter().find(|&&b| b > 1) {
            return Err(DynamicsError::InvalidStatus(bad));
        }
        let capacity = bits.len();
        Ok(Self { id, bits, capacity })
    }

    pub fn push(&mut self, bit: u8) -> Result<(), DynamicsError> {
        Status::from_bit(bit)?;
        if self.bits.len() >= self.capacity {
            return Err(DynamicsError::CapacityExceeded { capacity: self.capacity });
        }
        self.bits.push(bit);
        Ok(())
    }

    /// Clears the record at the start of a new round of `epochs` epochs.
    pub fn reset(&mut self, epochs: usize) {
        self.bits.clear();
        self.capacity = epochs;
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub status: Status,
    pub len: usize,
}

/// Maximal runs of equal status, in sequence order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentDecomposition {
    pub segments: Vec<Segment>,
    /// Number of misclassified runs.
    pub n_u: usize,
    /// Number of memorized runs.
    pub n_l: usize,
}

impl SegmentDecomposition {
    /// Total epochs spent misclassified.
    pub fn misclassified_epochs(&self) -> usize {
        self.total(Status::Misclassified)
    }

    /// Total epochs spent memorized.
    pub fn memorized_epochs(&self) -> usize {
        self.total(Status::Memorized)
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    fn total(&self, status: Status) -> usize {
        self.segments.iter().filter(|s| s.status == status).map(|s| s.len).sum()
    }

    /// Expands the runs back into the bit sequence.
    pub fn to_bits(&self) -> Vec<u8> {
        self.segments.iter().flat_map(|s| std::iter::repeat_n(s.status.bit(), s.len)).collect()
    }
}

pub fn segment(bits: &[u8]) -> Result<SegmentDecomposition, DynamicsError> {
    let (&first, _) = bits.split_first().ok_or(DynamicsError::EmptySequence)?;
    let mut segments = Vec::new();
    let mut current = Segment { status: Status::from_bit(first)?, len: 0 };
    for &bit in bits {
        let status = Status::from_bit(bit)?;
        if status == current.status {
            current.len += 1;
        } else {
            segments.push(current);
            current = Segment { status, len: 1 };
        }
    }
    segments.push(current);

    let n_u = segments.iter().filter(|s| s.status == Status::Misclassified).count();
    let n_l = segments.len() - n_u;
    Ok(SegmentDecomposition { segments, n_u, n_l })
}

/// Mean misclassified-run length; 0 when the instance was never misclassified.
pub fn memorization_difficulty(d: &SegmentDecomposition) -> f64 {
    mean_run(d.misclassified_epochs(), d.n_u)
}

/// Mean memorized-run length; 0 when the instance was never memorized.
pub fn forgetting_difficulty(d: &SegmentDecomposition) -> f64 {
    mean_run(d.memorized_epochs(), d.n_l)
}

fn mean_run(total: usize, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        total as f64 / count as f64
    }
}

/// `M - lambda * F`.
pub fn metric_full(d: &SegmentDecomposition, lambda: f64) -> f64 {
    memorization_difficulty(d) - lambda * forgetting_difficulty(d)
}

/// Total misclassified epochs minus `lambda` times total memorized epochs.
pub fn metric_simplified(d: &SegmentDecomposition, lambda: f64) -> f64 {
    d.misclassified_epochs() as f64 - lambda * d.memorized_epochs() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Full,
    #[default]
    Simplified,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub m: f64,
    pub f: f64,
    pub c_full: f64,
    pub c_simplified: f64,
}

impl InstanceMetrics {
    pub fn from_bits(bits: &[u8], lambda: f64) -> Result<Self, DynamicsError> {
        let d = segment(bits)?;
        Ok(Self {
            m: memorization_difficulty(&d),
            f: forgetting_difficulty(&d),
            c_full: metric_full(&d, lambda),
            c_simplified: metric_simplified(&d, lambda),
        })
    }

    pub fn score(&self, kind: MetricKind) -> f64 {
        match kind {
            MetricKind::Full => self.c_full,
            MetricKind::Simplified => self.c_simplified,
        }
    }
}

/// Scores every sequence in parallel; the map keeps instance-id order.
pub fn score_sequences<'a, I>(
    sequences: I,
    lambda: f64,
    kind: MetricKind,
) -> Result<BTreeMap<InstanceId, f64>, DynamicsError>
where
    I: IntoIterator<Item = &'a PredictionSequence>,
{
    let seqs: Vec<&PredictionSequence> = sequences.into_iter().collect();
    seqs.par_iter()
        .map(|s| InstanceMetrics::from_bits(s.bits(), lambda).map(|m| (s.id.clone(), m.score(kind))))
        .collect::<Result<Vec<_>, _>>()
        .map(|v| v.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(status: Status, len: usize) -> Segment {
        Segment { status, len }
    }

    use Status::{Memorized as L, Misclassified as U};

    fn decomp(runs: &[(Status, usize)]) -> SegmentDecomposition {
        let bits: Vec<u8> = runs.iter().flat_map(|&(s, n)| std::iter::repeat_n(s.bit(), n)).collect();
        segment(&bits).unwrap()
    }

    #[test]
    fn record_status_cases() {
        assert_eq!(record_status(3, 3), 1);
        assert_eq!(record_status(3, 7), 0);
        assert_eq!(record_status(0, 0), 1);
    }

    #[test]
    fn segment_examples() {
        let d = segment(&[0, 0, 1, 1, 0, 1]).unwrap();
        assert_eq!(d.segments, vec![seg(U, 2), seg(L, 2), seg(U, 1), seg(L, 1)]);
        assert_eq!((d.n_u, d.n_l), (2, 2));

        let d = segment(&[1, 1, 1, 1]).unwrap();
        assert_eq!(d.segments, vec![seg(L, 4)]);
        assert_eq!((d.n_u, d.n_l), (0, 1));

        let d = segment(&[0]).unwrap();
        assert_eq!(d.segments, vec![seg(U, 1)]);
        assert_eq!((d.n_u, d.n_l), (1, 0));
    }

    #[test]
    fn segment_rejects_empty_and_bad_bits() {
        assert_eq!(segment(&[]), Err(DynamicsError::EmptySequence));
        assert_eq!(segment(&[0, 2]), Err(DynamicsError::InvalidStatus(2)));
    }

    #[test]
    fn difficulty_examples() {
        let mixed = decomp(&[(U, 2), (L, 2), (U, 1), (L, 1)]);
        assert_eq!(memorization_difficulty(&mixed), 1.5);
        assert_eq!(forgetting_difficulty(&mixed), 1.5);

        assert_eq!(memorization_difficulty(&decomp(&[(L, 4)])), 0.0);
        assert_eq!(memorization_difficulty(&decomp(&[(U, 5)])), 5.0);
        assert_eq!(forgetting_difficulty(&decomp(&[(U, 4)])), 0.0);
        assert_eq!(forgetting_difficulty(&decomp(&[(L, 3), (U, 1), (L, 3)])), 3.0);
    }

    #[test]
    fn metric_examples() {
        let mixed = decomp(&[(U, 2), (L, 2), (U, 1), (L, 1)]);
        assert_eq!(metric_full(&mixed, 1.0), 0.0);
        assert_eq!(metric_simplified(&mixed, 1.0), 0.0);
        assert_eq!(metric_simplified(&decomp(&[(L, 4)]), 1.0), -4.0);
        assert_eq!(metric_simplified(&decomp(&[(U, 2), (L, 2)]), 0.5), 1.0);

        for p in [1, 7, 50] {
            for lambda in [0.0, 0.5, 1.0, 2.5] {
                let all_l = decomp(&[(L, p)]);
                assert_eq!(metric_full(&all_l, lambda), -lambda * p as f64);
                let all_u = decomp(&[(U, p)]);
                assert_eq!(metric_full(&all_u, lambda), p as f64);
            }
        }
    }

    #[test]
    fn sequence_capacity_and_reset() {
        let mut s = PredictionSequence::new("a".into(), 2);
        s.push(1).unwrap();
        s.push(0).unwrap();
        assert_eq!(s.push(1), Err(DynamicsError::CapacityExceeded { capacity: 2 }));
        assert_eq!(s.push(3), Err(DynamicsError::InvalidStatus(3)));
        s.reset(3);
        assert!(s.is_empty());
        assert_eq!(s.capacity(), 3);
    }

    #[test]
    fn scores_are_keyed_in_id_order() {
        let seqs: Vec<PredictionSequence> = [("10", vec![0, 0]), ("2", vec![1, 1]), ("1", vec![0, 1])]
            .into_iter()
            .map(|(id, b)| PredictionSequence::from_bits(id.into(), b).unwrap())
            .collect();
        let scores = score_sequences(&seqs, 1.0, MetricKind::Simplified).unwrap();
        let order: Vec<(&str, f64)> = scores.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        assert_eq!(order, [("1", 0.0), ("2", -2.0), ("10", 2.0)]);
    }

    fn bits_strategy() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..=1, 1..400)
    }

    proptest! {
        #[test]
        fn segmentation_round_trips(bits in bits_strategy()) {
            let d = segment(&bits).unwrap();
            prop_assert_eq!(d.to_bits(), bits.clone());
            prop_assert_eq!(d.len(), bits.len());
            prop_assert_eq!(d.n_u + d.n_l, d.segments.len());
            for w in d.segments.windows(2) {
                prop_assert_ne!(w[0].status, w[1].status);
            }
        }

        #[test]
        fn simplified_with_unit_lambda_is_zeros_minus_ones(bits in bits_strategy()) {
            let zeros = bits.iter().filter(|&&b| b == 0).count() as f64;
            let ones = bits.len() as f64 - zeros;
            prop_assert_eq!(metric_simplified(&segment(&bits).unwrap(), 1.0), zeros - ones);
        }

        #[test]
        fn appending_moves_simplified_metric_monotonically(
            bits in bits_strategy(),
            lambda in 0.0f64..4.0,
        ) {
            let base = metric_simplified(&segment(&bits).unwrap(), lambda);
            let mut with_zero = bits.clone();
            with_zero.push(0);
            let mut with_one = bits;
            with_one.push(1);
            prop_assert!(metric_simplified(&segment(&with_zero).unwrap(), lambda) >= base);
            prop_assert!(metric_simplified(&segment(&with_one).unwrap(), lambda) <= base);
        }

        #[test]
        fn metrics_stay_in_bounds(bits in bits_strategy(), lambda in 0.0f64..4.0) {
            let p = bits.len() as f64;
            let m = InstanceMetrics::from_bits(&bits, lambda).unwrap();
            prop_assert!((0.0..=p).contains(&m.m));
            prop_assert!((0.0..=p).contains(&m.f));
            prop_assert!(m.c_simplified >= -lambda * p && m.c_simplified <= p);
        }

        #[test]
        fn scoring_commutes_with_permutation(
            seqs in prop::collection::vec(bits_strategy(), 1..30),
            rot in 0usize..30,
        ) {
            let build = |order: &[usize]| -> Vec<PredictionSequence> {
                order
                    .iter()
                    .map(|&i| PredictionSequence::from_bits(i.into(), seqs[i].clone()).unwrap())
                    .collect()
            };
            let forward: Vec<usize> = (0..seqs.len()).collect();
            let mut rotated = forward.clone();
            rotated.rotate_left(rot % seqs.len());
            let a = score_sequences(&build(&forward), 1.0, MetricKind::Full).unwrap();
            let b = score_sequences(&build(&rotated), 1.0, MetricKind::Full).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
