use std::collections::{BTreeMap, HashSet};

use super::{check_base_classes, TrainError};
use crate::datastore::{Dataset, SemiSplit};
use crate::diffmath::argmax_rows;
use crate::model::{Checkpoint, Model};
use crate::rng::sha256_hex;

const CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub row: usize,
    /// Base-classifier index, not a global class.
    pub label: usize,
    pub confidence: f64,
}

/// One pseudo-label per unlabeled item, in unlabeled-pool order.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledSet {
    pub items: Vec<PseudoLabel>,
    pub source_hash: String,
}

impl PseudoLabeledSet {
    /// Checks that the set labels every unlabeled item of `split` exactly
    /// once with a valid base index.
    pub fn validate(&self, split: &SemiSplit, num_base: usize) -> Result<(), TrainError> {
        let mut seen = HashSet::with_capacity(self.items.len());
        for it in &self.items {
            if it.label >= num_base {
                return Err(TrainError::Config(format!("pseudo-label {} for row {} exceeds {num_base} base classes", it.label, it.row)));
            }
            if !seen.insert(it.row) {
                return Err(TrainError::Config(format!("row {} pseudo-labeled twice", it.row)));
            }
        }
        let pool: HashSet<usize> = split.unlabeled_rows().iter().copied().collect();
        if seen != pool {
            return Err(TrainError::Config(format!(
                "pseudo-labels cover {} rows, unlabeled pool has {}",
                seen.len(),
                pool.len()
            )));
        }
        Ok(())
    }
}

/// SHA-256 of the model's parameters in checkpoint encoding.
pub fn model_digest(model: &Model) -> String {
    let bytes = Checkpoint::from_model(model, BTreeMap::new()).to_bytes().expect("fixed metadata encodes");
    sha256_hex(&bytes)
}

/// Base-classifier argmax over every unlabeled item. No confidence
/// filtering; ties go to the lowest class index.
pub fn pseudo_label(model: &Model, dataset: &Dataset, split: &SemiSplit) -> Result<PseudoLabeledSet, TrainError> {
    let rows = split.unlabeled_rows();
    let mut items = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(CHUNK) {
        let p = model.base_probs(&dataset.gather(chunk))?;
        for ((&row, label), probs) in chunk.iter().zip(argmax_rows(&p)).zip(p.rows()) {
            items.push(PseudoLabel { row, label, confidence: probs[label] });
        }
    }
    Ok(PseudoLabeledSet { items, source_hash: model_digest(model) })
}

/// Fraction of pseudo-labels that match the hidden labels. Audit only:
/// reads the sealed labels and fails when the oracle is disabled.
pub fn audit_pseudo_labels(
    set: &PseudoLabeledSet,
    split: &SemiSplit,
    base_classes: &[usize],
) -> Result<f64, TrainError> {
    check_base_classes(base_classes, base_classes.len())?;
    let oracle = split.oracle()?;
    if set.items.is_empty() {
        return Ok(0.0);
    }
    let hits = set
        .items
        .iter()
        .filter(|it| oracle.label_of(it.row) == base_classes.get(it.label).copied())
        .count();
    Ok(hits as f64 / set.items.len() as f64)
}
