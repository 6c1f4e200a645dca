use std::collections::HashMap;

use rand::seq::SliceRandom;

use super::{DataError, Dataset};
use crate::rng;

/// Ground-truth labels of the unlabeled items, readable only through
/// [`UnlabeledPool::oracle`]. Any caller of that accessor is by definition
/// running in oracle (violation) mode.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Sealed(HashMap<usize, usize>);

/// A set of dataset rows whose labels must not be consulted by practical code paths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnlabeledPool {
    rows: Vec<usize>,
    hidden: Sealed,
    oracle_enabled: bool,
}

/// Read-only view of hidden labels handed out by the oracle accessor.
#[derive(Debug, Clone, Copy)]
pub struct LabelOracle<'a> {
    labels: &'a HashMap<usize, usize>,
}

impl LabelOracle<'_> {
    pub fn label_of(&self, row: usize) -> Option<usize> {
        self.labels.get(&row).copied()
    }
}

impl UnlabeledPool {
    /// `rows` with their true labels sealed. The oracle starts enabled.
    pub fn sealed(rows: Vec<usize>, labels: impl Fn(usize) -> usize) -> Self {
        let hidden = rows.iter().map(|&r| (r, labels(r))).collect();
        Self { rows, hidden: Sealed(hidden), oracle_enabled: true }
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn oracle_enabled(&self) -> bool {
        self.oracle_enabled
    }

    pub fn disable_oracle(&mut self) {
        self.oracle_enabled = false;
    }

    /// The only way to read hidden labels.
    pub fn oracle(&self) -> Result<LabelOracle<'_>, DataError> {
        if self.oracle_enabled {
            Ok(LabelOracle { labels: &self.hidden.0 })
        } else {
            Err(DataError::OracleDisabled)
        }
    }
}

/// Labeled / unlabeled / test split of the base classes. Labels are global
/// class indices of the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemiSplit {
    labeled: Vec<(usize, usize)>,
    unlabeled: UnlabeledPool,
    test: Vec<(usize, usize)>,
}

impl SemiSplit {
    pub fn from_parts(
        labeled: Vec<(usize, usize)>,
        unlabeled: UnlabeledPool,
        test: Vec<(usize, usize)>,
    ) -> Result<Self, DataError> {
        let mut seen = std::collections::HashSet::new();
        let all = labeled.iter().map(|p| p.0).chain(unlabeled.rows.iter().copied()).chain(test.iter().map(|p| p.0));
        for row in all {
            if !seen.insert(row) {
                return Err(DataError::Invalid(format!("row {row} appears in more than one split part")));
            }
        }
        Ok(Self { labeled, unlabeled, test })
    }

    pub fn labeled(&self) -> &[(usize, usize)] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &UnlabeledPool {
        &self.unlabeled
    }

    pub fn unlabeled_rows(&self) -> &[usize] {
        self.unlabeled.rows()
    }

    pub fn test(&self) -> &[(usize, usize)] {
        &self.test
    }

    pub fn oracle(&self) -> Result<LabelOracle<'_>, DataError> {
        self.unlabeled.oracle()
    }

    pub fn disable_oracle(&mut self) {
        self.unlabeled.disable_oracle();
    }

    pub fn oracle_enabled(&self) -> bool {
        self.unlabeled.oracle_enabled()
    }

    pub fn labeled_classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.labeled.iter().map(|p| p.1).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Per base class: `n_labeled` labeled, `n_test` test, the rest unlabeled.
/// Deterministic per seed; the unlabeled order is shuffled so it carries no
/// class information.
pub fn split_semi(
    dataset: &Dataset,
    base_classes: &[usize],
    n_labeled: usize,
    n_test: usize,
    seed: u64,
) -> Result<SemiSplit, DataError> {
    let by_class = dataset.rows_by_class();
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut test = Vec::new();
    let mut classes = base_classes.to_vec();
    classes.sort_unstable();
    classes.dedup();
    for &c in &classes {
        let mut rows = by_class
            .get(c)
            .cloned()
            .ok_or_else(|| DataError::Invalid(format!("base class {c} not in dataset")))?;
        let need = n_labeled + n_test;
        if rows.len() < need {
            return Err(DataError::InsufficientSamples { class: c, have: rows.len(), need });
        }
        rows.shuffle(&mut rng::stream(seed, "split", &[c as u64]));
        labeled.extend(rows[..n_labeled].iter().map(|&r| (r, c)));
        test.extend(rows[n_labeled..need].iter().map(|&r| (r, c)));
        unlabeled.extend_from_slice(&rows[need..]);
    }
    unlabeled.shuffle(&mut rng::stream(seed, "split", &[u64::MAX]));
    let pool = UnlabeledPool::sealed(unlabeled, |r| dataset.label(r));
    SemiSplit::from_parts(labeled, pool, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::tests::toy;

    #[test]
    fn counts_follow_configuration() {
        let ds = toy(3, 600);
        let split = split_semi(&ds, &[0, 1, 2], 20, 100, 9).unwrap();
        assert_eq!(split.labeled().len(), 60);
        assert_eq!(split.test().len(), 300);
        assert_eq!(split.unlabeled_rows().len(), 3 * 480);
        let oracle = split.oracle().unwrap();
        for c in 0..3 {
            let nl = split.labeled().iter().filter(|p| p.1 == c).count();
            let nu = split.unlabeled_rows().iter().filter(|&&r| oracle.label_of(r) == Some(c)).count();
            assert_eq!((nl, nu), (20, 480));
        }
    }

    #[test]
    fn exact_fit_leaves_unlabeled_empty() {
        let ds = toy(2, 10);
        let split = split_semi(&ds, &[0, 1], 4, 6, 0).unwrap();
        assert!(split.unlabeled().is_empty());
        assert!(matches!(
            split_semi(&ds, &[0, 1], 5, 6, 0),
            Err(DataError::InsufficientSamples { have: 10, need: 11, .. })
        ));
    }

    #[test]
    fn deterministic_per_seed() {
        let ds = toy(4, 30);
        let a = split_semi(&ds, &[0, 2, 3], 5, 5, 1).unwrap();
        assert_eq!(a, split_semi(&ds, &[0, 2, 3], 5, 5, 1).unwrap());
        assert_ne!(a, split_semi(&ds, &[0, 2, 3], 5, 5, 2).unwrap());
    }

    #[test]
    fn oracle_can_be_disabled() {
        let ds = toy(2, 10);
        let mut split = split_semi(&ds, &[0, 1], 2, 2, 0).unwrap();
        assert!(split.oracle().is_ok());
        split.disable_oracle();
        assert!(matches!(split.oracle(), Err(DataError::OracleDisabled)));
    }
}
