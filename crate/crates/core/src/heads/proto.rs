use crate::diffmath::{one_hot, Array, Tape, Var};

use super::HeadError;

/// Class means of `support` rows grouped by `labels ∈ 0..ways`.
pub fn proto_fit(tape: &Tape, support: Var, labels: &[usize], ways: usize) -> Result<Var, HeadError> {
    let n = tape.shape(support).0;
    if labels.len() != n {
        return Err(HeadError::Dimension(format!("{n} support rows, {} labels", labels.len())));
    }
    let mut counts = vec![0usize; ways];
    for &l in labels {
        if l >= ways {
            return Err(HeadError::Dimension(format!("label {l} with {ways} ways")));
        }
        counts[l] += 1;
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(HeadError::EmptyClass(j));
    }
    let mut avg = one_hot(labels, ways).reversed_axes().as_standard_layout().to_owned();
    for (j, mut row) in avg.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| v / counts[j] as f64);
    }
    Ok(tape.matmul(tape.constant(avg), support)?)
}

/// Softmax over negative squared Euclidean distance to each prototype.
pub fn proto_predict(tape: &Tape, queries: Var, prototypes: Var) -> Result<Var, HeadError> {
    let (dq, dp) = (tape.shape(queries).1, tape.shape(prototypes).1);
    if dq != dp {
        return Err(HeadError::Dimension(format!("query width {dq}, prototype width {dp}")));
    }
    let d = tape.cross_sq_dist(queries, prototypes)?;
    Ok(tape.row_softmax(tape.scale(d, -1.0)?)?)
}

/// One soft k-means step: each prototype absorbs the unlabeled rows in
/// proportion to their current assignment probability.
pub fn semiproto_refine(
    tape: &Tape,
    prototypes: Var,
    support: Var,
    labels: &[usize],
    unlabeled: Var,
) -> Result<Var, HeadError> {
    let (ways, _) = tape.shape(prototypes);
    let n_u = tape.shape(unlabeled).0;
    if n_u == 0 {
        return Ok(prototypes);
    }
    let assign = proto_predict(tape, unlabeled, prototypes)?;
    let assign_t = tape.transpose(assign)?;
    let members = tape.constant(one_hot(labels, ways).reversed_axes().as_standard_layout().to_owned());
    let support_sum = tape.matmul(members, support)?;
    let numerator = tape.add(support_sum, tape.matmul(assign_t, unlabeled)?)?;
    let mut counts = Array::zeros((ways, 1));
    for &l in labels {
        counts[[l, 0]] += 1.0;
    }
    let soft_counts = tape.matmul(assign_t, tape.constant(Array::ones((n_u, 1))))?;
    let denominator = tape.add(tape.constant(counts), soft_counts)?;
    Ok(tape.div_rows(numerator, denominator)?)
}

/// Fitted prototypes, for tape-free use.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoState {
    pub prototypes: Array,
}

impl ProtoState {
    pub fn fit(support: &Array, labels: &[usize], ways: usize) -> Result<Self, HeadError> {
        let tape = Tape::new();
        let p = proto_fit(&tape, tape.constant(support.clone()), labels, ways)?;
        let prototypes = tape.value(p).clone();
        Ok(Self { prototypes })
    }

    pub fn predict(&self, queries: &Array) -> Result<Array, HeadError> {
        let tape = Tape::new();
        let p = proto_predict(&tape, tape.constant(queries.clone()), tape.constant(self.prototypes.clone()))?;
        let out = tape.value(p).clone();
        Ok(out)
    }

    pub fn refine(&self, support: &Array, labels: &[usize], unlabeled: &Array) -> Result<Self, HeadError> {
        let tape = Tape::new();
        let c = semiproto_refine(
            &tape,
            tape.constant(self.prototypes.clone()),
            tape.constant(support.clone()),
            labels,
            tape.constant(unlabeled.clone()),
        )?;
        let prototypes = tape.value(c).clone();
        Ok(Self { prototypes })
    }
}
