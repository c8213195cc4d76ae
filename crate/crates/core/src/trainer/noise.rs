//! Label-noise injection. Only observed labels of training rows change;
//! features, true labels and test rows are left untouched.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{Split, ToyDataset};
use super::TrainerError;

/// Flips exactly `floor(ratio * n_train)` training labels, each to a class
/// drawn uniformly from the other `n_classes - 1` classes.
pub fn inject_symmetric_noise(ds: &ToyDataset, ratio: f64, seed: u64) -> Result<ToyDataset, TrainerError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(TrainerError::InvalidNoise(format!("ratio {ratio} must lie in [0, 1)")));
    }
    if ds.n_classes < 2 {
        return Err(TrainerError::InvalidNoise("symmetric noise needs at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = ds.indices(Split::Train);
    let n_flip = (ratio * train.len() as f64).floor() as usize;
    train.shuffle(&mut rng);

    let mut out = ds.clone();
    for &i in &train[..n_flip] {
        let truth = ds.true_labels[i];
        let draw = rng.random_range(0..ds.n_classes - 1);
        out.observed_labels[i] = if draw >= truth { draw + 1 } else { draw };
    }
    Ok(out)
}

/// For every source class in `class_map`, flips `floor(ratio * n_c)` of its
/// training rows (grouped by true label) to the mapped class.
pub fn inject_asymmetric_noise(
    ds: &ToyDataset,
    ratio: f64,
    class_map: &BTreeMap<usize, usize>,
    seed: u64,
) -> Result<ToyDataset, TrainerError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(TrainerError::InvalidNoise(format!("ratio {ratio} must lie in [0, 1]")));
    }
    if let Some((src, _)) = class_map.iter().find(|(s, t)| s == t) {
        return Err(TrainerError::InvalidNoise(format!("class map sends {src} to itself")));
    }
    if let Some((s, t)) = class_map.iter().find(|(s, t)| **s >= ds.n_classes || **t >= ds.n_classes) {
        return Err(TrainerError::InvalidNoise(format!("class map entry {s}->{t} is out of range")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = ds.indices(Split::Train);
    let mut out = ds.clone();
    for (&src, &dst) in class_map {
        let mut members: Vec<usize> = train.iter().copied().filter(|&i| ds.true_labels[i] == src).collect();
        let n_flip = (ratio * members.len() as f64).floor() as usize;
        members.shuffle(&mut rng);
        for &i in &members[..n_flip] {
            out.observed_labels[i] = dst;
        }
    }
    Ok(out)
}

/// `c -> (c + 1) mod n_classes`.
pub fn circular_map(n_classes: usize) -> BTreeMap<usize, usize> {
    (0..n_classes).map(|c| (c, (c + 1) % n_classes)).collect()
}

/// Circular shift inside each group, e.g. the classes of one super-class.
/// Singleton groups are skipped.
pub fn circular_map_within(groups: &[Vec<usize>]) -> BTreeMap<usize, usize> {
    groups
        .iter()
        .filter(|g| g.len() > 1)
        .flat_map(|g| g.iter().enumerate().map(|(k, &c)| (c, g[(k + 1) % g.len()])))
        .collect()
}
