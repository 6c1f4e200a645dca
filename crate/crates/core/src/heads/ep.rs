//! Embedding propagation followed by label propagation over an episode graph.

use crate::diffmath::{one_hot, Array, Tape, Var};

use super::HeadError;

/// How propagated label scores become class probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreNormalization {
    Softmax,
    /// `(s + ε) / Σ (s + ε)`; scores are non-negative for α in [0, 1).
    RowSum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpConfig {
    /// Scaling of the embedding-propagation stage.
    pub alpha_embed: f64,
    /// Scaling of the label-propagation stage.
    pub alpha_label: f64,
    pub normalization: ScoreNormalization,
}

impl Default for EpConfig {
    fn default() -> Self {
        Self { alpha_embed: 0.2, alpha_label: 0.2, normalization: ScoreNormalization::Softmax }
    }
}

fn check_alpha(alpha: f64) -> Result<(), HeadError> {
    if (0.0..1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(HeadError::Dimension(format!("propagation scale {alpha} outside [0, 1)")))
    }
}

/// Gaussian adjacency over node embeddings, bandwidth from the variance of
/// the off-diagonal squared distances.
pub fn ep_adjacency(tape: &Tape, z: Var) -> Result<Var, HeadError> {
    if tape.shape(z).0 < 2 {
        return Err(HeadError::Dimension("graph needs at least two nodes".into()));
    }
    let d2 = tape.pairwise_sq_dist(z)?;
    Ok(tape.gaussian_adjacency(d2)?)
}

/// `I − α D^{-1/2} A D^{-1/2}`.
fn propagation_system(tape: &Tape, a: Var, alpha: f64) -> Result<Var, HeadError> {
    check_alpha(alpha)?;
    let l = tape.sym_normalize(a)?;
    Ok(tape.identity_minus_scaled(l, alpha)?)
}

/// Explicit propagator `P = (I − α L)⁻¹`.
pub fn ep_propagator(tape: &Tape, a: Var, alpha: f64) -> Result<Var, HeadError> {
    let system = propagation_system(tape, a, alpha)?;
    let n = tape.shape(a).0;
    Ok(tape.linear_solve(system, tape.constant(Array::eye(n)))?)
}

/// `Z̄ = P Z` with `P` built from `Z` itself; computed as a solve rather
/// than through the explicit inverse.
pub fn ep_embed_propagate(tape: &Tape, z: Var, alpha: f64) -> Result<Var, HeadError> {
    let a = ep_adjacency(tape, z)?;
    let system = propagation_system(tape, a, alpha)?;
    Ok(tape.linear_solve(system, z)?)
}

/// Propagated label scores for every node. Nodes are ordered support
/// first; the first `support_labels.len()` rows seed the one-hot labels,
/// all remaining rows (queries, unlabeled) start at zero.
pub fn ep_scores(
    tape: &Tape,
    z: Var,
    support_labels: &[usize],
    ways: usize,
    cfg: &EpConfig,
) -> Result<Var, HeadError> {
    let n = tape.shape(z).0;
    let n_s = support_labels.len();
    if n_s > n {
        return Err(HeadError::Dimension(format!("{n_s} support labels for {n} nodes")));
    }
    let mut present = vec![false; ways];
    for &l in support_labels {
        if l >= ways {
            return Err(HeadError::Dimension(format!("label {l} with {ways} ways")));
        }
        present[l] = true;
    }
    if let Some(j) = present.iter().position(|p| !p) {
        return Err(HeadError::EmptyClass(j));
    }
    let z_bar = ep_embed_propagate(tape, z, cfg.alpha_embed)?;
    let a_bar = ep_adjacency(tape, z_bar)?;
    let system = propagation_system(tape, a_bar, cfg.alpha_label)?;
    let mut seeds = Array::zeros((n, ways));
    seeds.slice_mut(ndarray::s![..n_s, ..]).assign(&one_hot(support_labels, ways));
    Ok(tape.linear_solve(system, tape.constant(seeds))?)
}

/// Turns score rows into distributions.
pub fn normalize_scores(tape: &Tape, scores: Var, how: ScoreNormalization) -> Result<Var, HeadError> {
    match how {
        ScoreNormalization::Softmax => Ok(tape.row_softmax(scores)?),
        ScoreNormalization::RowSum => {
            const EPS: f64 = 1e-12;
            let (n, m) = tape.shape(scores);
            let shifted = tape.add(scores, tape.constant(Array::from_elem((n, m), EPS)))?;
            let sums = tape.matmul(shifted, tape.constant(Array::ones((m, 1))))?;
            Ok(tape.div_rows(shifted, sums)?)
        }
    }
}

/// Query probabilities from label propagation. `z` holds support rows,
/// then `n_query` query rows, then any unlabeled rows.
pub fn ep_predict(
    tape: &Tape,
    z: Var,
    support_labels: &[usize],
    ways: usize,
    n_query: usize,
    cfg: &EpConfig,
) -> Result<Var, HeadError> {
    let n_s = support_labels.len();
    if n_s + n_query > tape.shape(z).0 {
        return Err(HeadError::Dimension("fewer nodes than support + query".into()));
    }
    let scores = ep_scores(tape, z, support_labels, ways, cfg)?;
    let q = tape.slice_rows(scores, n_s, n_s + n_query)?;
    normalize_scores(tape, q, cfg.normalization)
}
