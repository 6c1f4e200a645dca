//! Dense 2-D array algebra with reverse-mode gradients.
//!
//! Only the operations the training pipeline needs are provided: affine
//! maps, distances, softmax, cross-entropy, and a differentiable dense
//! solve used by the graph propagation head.

mod linalg;
mod tape;

pub use linalg::{LuFactors, PIVOT_FLOOR};
pub use tape::{
    cross_sq_dist, pairwise_sq_dist, sgd_step, softmax_rows, Array, Gradients, Tape, Var,
    DEGREE_EPS, LOG_FLOOR, VARIANCE_FLOOR,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("singular system: pivot {pivot:e} in column {column}")]
    Singular { pivot: f64, column: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalar { shape: (usize, usize) },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// One-hot rows for `labels` over `classes` columns.
pub fn one_hot(labels: &[usize], classes: usize) -> Array {
    let mut out = Array::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        out[[i, l]] = 1.0;
    }
    out
}

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax_rows(x: &Array) -> Vec<usize> {
    x.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
