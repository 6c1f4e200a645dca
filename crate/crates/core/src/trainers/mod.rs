//! Pre-training on the partly labeled base set and episodic finetuning on
//! labeled plus pseudo-labeled data.

mod metatrain;
mod pretrain;
mod pseudo;
mod schedule;

use thiserror::Error;

use crate::datastore::DataError;
use crate::diffmath::MathError;
use crate::heads::HeadError;
use crate::model::ModelError;
use crate::sampler::SampleError;

pub use metatrain::{
    combine_on_tape, episode_objective, metatrain, metatrain_plml, plml_pool, EpisodeBatch, MetaTrainOutput,
    Objective, PLMLConfig,
};
pub use pretrain::{pretrain_selftrain, pretrain_supervised, PretrainOutput, SSLConfig};
pub use pseudo::{audit_pseudo_labels, model_digest, pseudo_label, PseudoLabel, PseudoLabeledSet};
pub use schedule::PlateauScheduler;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("insufficient training data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Math(#[from] MathError),
}

impl TrainError {
    /// The underlying numeric failure, if this error is one.
    pub fn math(&self) -> Option<&MathError> {
        match self {
            TrainError::Math(m)
            | TrainError::Model(ModelError::Math(m))
            | TrainError::Head(HeadError::Math(m)) => Some(m),
            _ => None,
        }
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub phase: &'static str,
    pub lr: f64,
    pub loss: f64,
    pub val_loss: Option<f64>,
}

/// `epoch,phase,lr,loss,val_loss`; an absent validation loss is an empty field.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("epoch,phase,lr,loss,val_loss\n");
    for r in rows {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.phase, r.lr, r.loss, val));
    }
    out
}

/// Base-classifier index of each global class, given the sorted base classes.
pub(crate) fn base_index(base_classes: &[usize], class: usize) -> Result<usize, TrainError> {
    base_classes
        .binary_search(&class)
        .map_err(|_| TrainError::Config(format!("class {class} is not a base class")))
}

pub(crate) fn check_base_classes(base_classes: &[usize], num_base: usize) -> Result<(), TrainError> {
    if !base_classes.windows(2).all(|w| w[0] < w[1]) {
        return Err(TrainError::Config("base classes must be sorted and distinct".into()));
    }
    if base_classes.len() != num_base {
        return Err(TrainError::Config(format!(
            "model classifies {num_base} base classes, partition has {}",
            base_classes.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_format() {
        let rows = [
            TraceRow { epoch: 0, phase: "pretrain", lr: 0.05, loss: 1.5, val_loss: None },
            TraceRow { epoch: 1, phase: "metatrain", lr: 0.01, loss: 0.25, val_loss: Some(0.5) },
        ];
        assert_eq!(
            trace_csv(&rows),
            "epoch,phase,lr,loss,val_loss\n0,pretrain,0.05,1.5,\n1,metatrain,0.01,0.25,0.5\n"
        );
    }
}
