use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TrainerError;
use crate::id::InstanceId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Rows of a small classification dataset. `true_labels` is kept for
/// evaluation only; training sees `observed_labels`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub ids: Vec<InstanceId>,
    pub features: Vec<Vec<f64>>,
    pub observed_labels: Vec<usize>,
    pub true_labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub n_classes: usize,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn train_ids(&self) -> Vec<InstanceId> {
        self.indices(Split::Train).into_iter().map(|i| self.ids[i].clone()).collect()
    }

    pub fn index_of(&self) -> HashMap<InstanceId, usize> {
        self.ids.iter().cloned().enumerate().map(|(i, id)| (id, i)).collect()
    }

    /// Ground-truth clean flag of every training instance.
    pub fn clean_mask(&self) -> BTreeMap<InstanceId, bool> {
        self.indices(Split::Train)
            .into_iter()
            .map(|i| (self.ids[i].clone(), self.observed_labels[i] == self.true_labels[i]))
            .collect()
    }

    /// Fraction of training rows whose observed label is wrong.
    pub fn noise_ratio(&self) -> f64 {
        let train = self.indices(Split::Train);
        if train.is_empty() {
            return 0.0;
        }
        let noisy = train.iter().filter(|&&i| self.observed_labels[i] != self.true_labels[i]).count();
        noisy as f64 / train.len() as f64
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        let n = self.len();
        if [self.features.len(), self.observed_labels.len(), self.true_labels.len(), self.splits.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(TrainerError::InvalidDataset("column lengths differ".into()));
        }
        let d = self.dim();
        if let Some(i) = self.features.iter().position(|f| f.len() != d) {
            return Err(TrainerError::InvalidDataset(format!("row {i} has wrong feature count")));
        }
        if let Some(i) =
            (0..n).find(|&i| self.observed_labels[i] >= self.n_classes || self.true_labels[i] >= self.n_classes)
        {
            return Err(TrainerError::InvalidDataset(format!("row {i} has a label outside [0, {})", self.n_classes)));
        }
        Ok(())
    }

    /// Writes `id,feature_0..feature_{d-1},observed_label,true_label,split`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TrainerError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["id".to_string()];
        header.extend((0..self.dim()).map(|j| format!("feature_{j}")));
        header.extend(["observed_label", "true_label", "split"].map(String::from));
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![self.ids[i].to_string()];
            row.extend(self.features[i].iter().map(|v| v.to_string()));
            row.push(self.observed_labels[i].to_string());
            row.push(self.true_labels[i].to_string());
            row.push(self.splits[i].as_str().to_string());
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the CSV layout written by [`ToyDataset::write_csv`]. The class
    /// count is one more than the largest label seen unless given.
    pub fn read_csv<R: Read>(r: R, n_classes: Option<usize>) -> Result<Self, TrainerError> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let cols: Vec<&str> = headers.iter().collect();
        let d = cols.len().checked_sub(4).ok_or_else(|| {
            TrainerError::InvalidDataset("header needs id, features, observed_label, true_label, split".into())
        })?;
        let expected: Vec<String> = std::iter::once("id".to_string())
            .chain((0..d).map(|j| format!("feature_{j}")))
            .chain(["observed_label", "true_label", "split"].map(String::from))
            .collect();
        if cols != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(TrainerError::InvalidDataset(format!("unexpected header {cols:?}")));
        }

        let mut ds = ToyDataset {
            ids: vec![],
            features: vec![],
            observed_labels: vec![],
            true_labels: vec![],
            splits: vec![],
            n_classes: 0,
        };
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| TrainerError::InvalidDataset(format!("data row {}: bad {what}", line + 1));
            ds.ids.push(InstanceId::new(&rec[0]));
            let feats =
                (1..=d).map(|j| rec[j].parse::<f64>().map_err(|_| bad("feature"))).collect::<Result<Vec<_>, _>>()?;
            ds.features.push(feats);
            ds.observed_labels.push(rec[d + 1].parse().map_err(|_| bad("observed_label"))?);
            ds.true_labels.push(rec[d + 2].parse().map_err(|_| bad("true_label"))?);
            ds.splits.push(match &rec[d + 3] {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return Err(bad("split")),
            });
        }
        let max_label = ds.observed_labels.iter().chain(&ds.true_labels).copied().max().map_or(0, |m| m + 1);
        ds.n_classes = n_classes.unwrap_or(max_label);
        ds.validate()?;
        Ok(ds)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub n_classes: usize,
    /// Training rows per class.
    pub per_class: usize,
    /// Test rows per class.
    #[serde(default)]
    pub test_per_class: usize,
    pub dim: usize,
    /// Within-class standard deviation; class means are unit distance apart.
    pub spread: f64,
    pub seed: u64,
}

/// Class means with unit pairwise separation between neighbours.
fn class_centers(n_classes: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n_classes)
        .map(|c| {
            let mut v = vec![0.0; dim];
            if dim >= n_classes {
                v[c] = std::f64::consts::FRAC_1_SQRT_2;
            } else if dim >= 2 {
                let radius = 0.5 / (std::f64::consts::PI / n_classes as f64).sin();
                let angle = 2.0 * std::f64::consts::PI * c as f64 / n_classes as f64;
                v[0] = radius * angle.cos();
                v[1] = radius * angle.sin();
            } else {
                v[0] = c as f64;
            }
            v
        })
        .collect()
}

/// Gaussian blobs; train rows first, then test rows, ids `0..n`.
pub fn make_blobs(spec: &BlobSpec) -> Result<ToyDataset, TrainerError> {
    if spec.n_classes == 0 || spec.per_class == 0 || spec.dim == 0 || !(spec.spread >= 0.0) {
        return Err(TrainerError::InvalidDataset(format!("invalid blob spec {spec:?}")));
    }
    let centers = class_centers(spec.n_classes, spec.dim);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut ds = ToyDataset {
        ids: vec![],
        features: vec![],
        observed_labels: vec![],
        true_labels: vec![],
        splits: vec![],
        n_classes: spec.n_classes,
    };
    for (split, per_class) in [(Split::Train, spec.per_class), (Split::Test, spec.test_per_class)] {
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                let x = center.iter().map(|m| m + spec.spread * noise.sample(&mut rng)).collect();
                ds.ids.push(InstanceId::from(ds.ids.len()));
                ds.features.push(x);
                ds.observed_labels.push(c);
                ds.true_labels.push(c);
                ds.splits.push(split);
            }
        }
    }
    Ok(ds)
}
