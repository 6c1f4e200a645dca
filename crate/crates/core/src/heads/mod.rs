//! Few-shot classifiers over episode embeddings. Neither head has
//! learnable parameters of its own; all learning happens in the backbone.

mod ep;
mod proto;

use thiserror::Error;

use crate::diffmath::{MathError, Tape, Var};

pub use ep::{
    ep_adjacency, ep_embed_propagate, ep_predict, ep_propagator, ep_scores, normalize_scores, EpConfig,
    ScoreNormalization,
};
pub use proto::{proto_fit, proto_predict, semiproto_refine, ProtoState};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("episode class {0} has no support item")]
    EmptyClass(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Math(#[from] MathError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Head {
    /// Prototypes and Euclidean softmax; queries are classified independently.
    Proto,
    /// Embedding + label propagation over the support/query/unlabeled graph.
    Ep(EpConfig),
    /// Prototypes refined by one soft assignment step over the unlabeled rows.
    SemiProto,
}

impl Head {
    pub fn name(&self) -> &'static str {
        match self {
            Head::Proto => "proto",
            Head::Ep(_) => "ep",
            Head::SemiProto => "semiproto",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "proto" => Some(Head::Proto),
            "ep" => Some(Head::Ep(EpConfig::default())),
            "semiproto" => Some(Head::SemiProto),
            _ => None,
        }
    }

    /// Query-class probabilities for an episode. `z` holds the support rows
    /// (labels `support_labels`), then `n_query` query rows, then any
    /// unlabeled rows.
    pub fn query_probs(
        &self,
        tape: &Tape,
        z: Var,
        support_labels: &[usize],
        ways: usize,
        n_query: usize,
    ) -> Result<Var, HeadError> {
        let n_s = support_labels.len();
        let n = tape.shape(z).0;
        if n_s + n_query > n {
            return Err(HeadError::Dimension(format!("{n} nodes for {n_s} support and {n_query} query")));
        }
        match self {
            Head::Ep(cfg) => ep_predict(tape, z, support_labels, ways, n_query, cfg),
            Head::Proto | Head::SemiProto => {
                let support = tape.slice_rows(z, 0, n_s)?;
                let queries = tape.slice_rows(z, n_s, n_s + n_query)?;
                let mut protos = proto_fit(tape, support, support_labels, ways)?;
                if *self == Head::SemiProto && n > n_s + n_query {
                    let unlabeled = tape.slice_rows(z, n_s + n_query, n)?;
                    protos = semiproto_refine(tape, protos, support, support_labels, unlabeled)?;
                }
                proto_predict(tape, queries, protos)
            }
        }
    }
}
