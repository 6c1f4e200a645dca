//! Feature-vector datasets, class partitions and the labeled / unlabeled /
//! test split of the base classes.

mod io;
mod split;
mod synth;

use std::collections::{BTreeSet, HashMap};

use ndarray::Array2;
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::diffmath::Array;
use crate::rng;

pub use io::{load_dataset, read_features, read_labels, save_dataset, write_features, write_labels};
pub use split::{split_semi, LabelOracle, SemiSplit, UnlabeledPool};
pub use synth::{make_synthetic, SynthConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("parse error at byte offset {offset}: {detail}")]
    Parse { offset: u64, detail: String },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("unknown sample id {0:?}")]
    UnknownId(String),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("class partition {requested} exceeds {available} classes")]
    PartitionOverflow { requested: usize, available: usize },
    #[error("class {class} has {have} samples, needs at least {need}")]
    InsufficientSamples { class: usize, have: usize, need: usize },
    #[error("label oracle is disabled for this split")]
    OracleDisabled,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Feature matrix with one class label and one string id per row.
///
/// Features are stored at 32-bit precision; everything downstream widens
/// to `f64` when building compute arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f32>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    sample_ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(
        features: Array2<f32>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        sample_ids: Vec<String>,
    ) -> Result<Self, DataError> {
        let n = features.nrows();
        if labels.len() != n || sample_ids.len() != n {
            return Err(DataError::Invalid(format!(
                "{n} feature rows, {} labels, {} ids",
                labels.len(),
                sample_ids.len()
            )));
        }
        let c = class_names.len();
        let mut counts = vec![0usize; c];
        for &l in &labels {
            if l >= c {
                return Err(DataError::Invalid(format!("label {l} out of range for {c} classes")));
            }
            counts[l] += 1;
        }
        if let Some(empty) = counts.iter().position(|&k| k == 0) {
            return Err(DataError::Invalid(format!("class {:?} has no samples", class_names[empty])));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite feature value".into()));
        }
        let mut index = HashMap::with_capacity(n);
        for (row, id) in sample_ids.iter().enumerate() {
            if index.insert(id.clone(), row).is_some() {
                return Err(DataError::DuplicateId(id.clone()));
            }
        }
        Ok(Self { features, labels, class_names, sample_ids, index })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, row: usize) -> usize {
        self.labels[row]
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.sample_ids[row]
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Rows of each class, in ascending row order.
    pub fn rows_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (row, &l) in self.labels.iter().enumerate() {
            out[l].push(row);
        }
        out
    }

    /// Gathers the given rows into an `f64` matrix.
    pub fn gather(&self, rows: &[usize]) -> Array {
        let mut out = Array::zeros((rows.len(), self.dim()));
        for (i, &r) in rows.iter().enumerate() {
            for (dst, src) in out.row_mut(i).iter_mut().zip(self.features.row(r).iter()) {
                *dst = f64::from(*src);
            }
        }
        out
    }
}

/// Disjoint base / validation / novel class sets (each sorted ascending).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPartition {
    pub base: Vec<usize>,
    pub val: Vec<usize>,
    pub novel: Vec<usize>,
}

impl ClassPartition {
    pub fn new(base: Vec<usize>, val: Vec<usize>, novel: Vec<usize>) -> Result<Self, DataError> {
        let mut seen = BTreeSet::new();
        for c in base.iter().chain(&val).chain(&novel) {
            if !seen.insert(*c) {
                return Err(DataError::Invalid(format!("class {c} appears in more than one partition")));
            }
        }
        let sorted = |mut v: Vec<usize>| {
            v.sort_unstable();
            v
        };
        Ok(Self { base: sorted(base), val: sorted(val), novel: sorted(novel) })
    }

    /// Position of a global class within the base set, i.e. its base-classifier index.
    pub fn base_index(&self, class: usize) -> Option<usize> {
        self.base.binary_search(&class).ok()
    }
}

/// Randomly assigns `counts = (base, val, novel)` classes; deterministic per seed.
pub fn partition_classes(
    dataset: &Dataset,
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<ClassPartition, DataError> {
    let (nb, nv, nn) = counts;
    let c = dataset.num_classes();
    if nb + nv + nn > c {
        return Err(DataError::PartitionOverflow { requested: nb + nv + nn, available: c });
    }
    let mut classes: Vec<usize> = (0..c).collect();
    classes.shuffle(&mut rng::stream(seed, "partition", &[]));
    ClassPartition::new(
        classes[..nb].to_vec(),
        classes[nb..nb + nv].to_vec(),
        classes[nb + nv..nb + nv + nn].to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy(classes: usize, per_class: usize) -> Dataset {
        let n = classes * per_class;
        let features = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f32);
        let labels = (0..n).map(|i| i / per_class).collect();
        let names = (0..classes).map(|c| format!("c{c}")).collect();
        let ids = (0..n).map(|i| format!("s{i}")).collect();
        Dataset::new(features, labels, names, ids).unwrap()
    }

    #[test]
    fn partition_sizes_and_disjointness() {
        let ds = toy(100, 1);
        let p = partition_classes(&ds, (64, 16, 20), 3).unwrap();
        assert_eq!((p.base.len(), p.val.len(), p.novel.len()), (64, 16, 20));
        let all: BTreeSet<_> = p.base.iter().chain(&p.val).chain(&p.novel).collect();
        assert_eq!(all.len(), 100);
        assert_eq!(p, partition_classes(&ds, (64, 16, 20), 3).unwrap());
        assert_ne!(p, partition_classes(&ds, (64, 16, 20), 4).unwrap());
    }

    #[test]
    fn partition_small_and_overflow() {
        let p = partition_classes(&toy(5, 2), (3, 1, 1), 0).unwrap();
        assert_eq!(p.base.len() + p.val.len() + p.novel.len(), 5);
        let err = partition_classes(&toy(4, 2), (3, 1, 1), 0).unwrap_err();
        assert!(matches!(err, DataError::PartitionOverflow { requested: 5, available: 4 }));
    }

    #[test]
    fn dataset_rejects_bad_input() {
        let f = Array2::<f32>::zeros((2, 1));
        let dup = Dataset::new(f.clone(), vec![0, 0], vec!["a".into()], vec!["x".into(), "x".into()]);
        assert!(matches!(dup, Err(DataError::DuplicateId(_))));
        let empty_class = Dataset::new(f.clone(), vec![0, 0], vec!["a".into(), "b".into()], vec!["x".into(), "y".into()]);
        assert!(matches!(empty_class, Err(DataError::Invalid(_))));
        let oob = Dataset::new(f, vec![0, 1], vec!["a".into()], vec!["x".into(), "y".into()]);
        assert!(matches!(oob, Err(DataError::Invalid(_))));
    }
}
