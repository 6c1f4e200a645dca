//! Few-shot evaluation on novel classes and the experiment sweeps built on it.

mod sweep;

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{DataError, Dataset, UnlabeledPool};
use crate::diffmath::{argmax_rows, Tape};
use crate::heads::{Head, HeadError};
use crate::model::{Model, ModelError};
use crate::rng;
use crate::sampler::{attach_unlabeled, sample_episode, ClassPool, EpisodeSpec, SampleError, UnlabeledMode};
use crate::trainers::TrainError;

pub use sweep::{run_degradation_sweep, run_selection_comparison, PipelineConfig, SelectionConfig, SweepConfig, Variant};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{mode} inference cannot use the {head} head")]
    ModeMismatch { mode: &'static str, head: &'static str },
    #[error("invalid evaluation setup: {0}")]
    Config(String),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl EvalError {
    pub fn math(&self) -> Option<&crate::diffmath::MathError> {
        match self {
            EvalError::Model(ModelError::Math(m)) | EvalError::Head(HeadError::Math(m)) => Some(m),
            EvalError::Train(t) => t.math(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InferenceMode {
    /// Each query against prototypes, independently.
    Inductive,
    /// Propagation over the support and query graph.
    Transductive,
    /// Propagation with unlabeled nodes attached.
    Semi,
}

impl InferenceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMode::Inductive => "inductive",
            InferenceMode::Transductive => "transductive",
            InferenceMode::Semi => "semi",
        }
    }

    /// The head this mode runs with by default.
    pub fn default_head(self) -> Head {
        match self {
            InferenceMode::Inductive => Head::Proto,
            InferenceMode::Transductive | InferenceMode::Semi => Head::Ep(Default::default()),
        }
    }

    fn accepts(self, head: &Head) -> bool {
        matches!(
            (self, head),
            (InferenceMode::Inductive, Head::Proto)
                | (InferenceMode::Transductive, Head::Ep(_))
                | (InferenceMode::Semi, Head::Ep(_) | Head::SemiProto)
        )
    }
}

impl FromStr for InferenceMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inductive" => Ok(Self::Inductive),
            "transductive" => Ok(Self::Transductive),
            "semi" => Ok(Self::Semi),
            _ => Err(format!("unknown inference mode {s:?} (expected inductive, transductive or semi)")),
        }
    }
}

/// One results row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub nl: usize,
    pub variant: String,
    pub head: String,
    pub mode: String,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub unlabeled: usize,
    pub acc: f64,
    pub ci: f64,
    pub episodes: usize,
    pub taint: bool,
    pub seed: u64,
}

impl MetricsRecord {
    pub fn tagged(mut self, nl: usize, variant: &str) -> Self {
        self.nl = nl;
        self.variant = variant.to_string();
        self
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> Result<Vec<u8>, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(["nl", "variant", "head", "mode", "ways", "shots", "queries", "unlabeled", "acc", "ci", "episodes", "taint", "seed"])?;
    }
    w.into_inner().map_err(|e| EvalError::Config(format!("csv buffer: {e}")))
}

pub fn read_metrics_csv(bytes: &[u8]) -> Result<Vec<MetricsRecord>, EvalError> {
    let mut r = csv::Reader::from_reader(bytes);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Every row of `classes`, with true labels.
pub fn class_pool(dataset: &Dataset, classes: &[usize]) -> ClassPool {
    let by_class = dataset.rows_by_class();
    ClassPool::from_pairs(classes.iter().flat_map(|&c| by_class[c].iter().map(move |&r| (r, c))))
}

/// Every row of `classes` as an unlabeled pool with sealed labels.
pub fn unlabeled_pool(dataset: &Dataset, classes: &[usize]) -> UnlabeledPool {
    let by_class = dataset.rows_by_class();
    let rows = classes.iter().flat_map(|&c| by_class[c].iter().copied()).collect();
    UnlabeledPool::sealed(rows, |r| dataset.label(r))
}

/// Settings of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSetup {
    pub spec: EpisodeSpec,
    pub mode: InferenceMode,
    pub episodes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub record: MetricsRecord,
    /// `(correct, total)` queries per episode.
    pub per_episode: Vec<(usize, usize)>,
}

/// Mean query accuracy over `setup.episodes` tasks drawn from `pool`, with
/// a normal-approximation 95% half-width. Episode `i` draws from its own
/// stream, so results do not depend on scheduling. The model is only read.
pub fn eval_fewshot(
    model: &Model,
    dataset: &Dataset,
    head: &Head,
    pool: &ClassPool,
    unlabeled: Option<&UnlabeledPool>,
    setup: &EvalSetup,
) -> Result<EvalOutcome, EvalError> {
    let EvalSetup { spec, mode, episodes, seed } = setup;
    if !mode.accepts(head) {
        return Err(EvalError::ModeMismatch { mode: mode.as_str(), head: head.name() });
    }
    let attach = spec.unlabeled > 0 && spec.mode != UnlabeledMode::None;
    if attach && *mode != InferenceMode::Semi {
        return Err(EvalError::Config(format!("{} inference takes no unlabeled items", mode.as_str())));
    }
    if attach && unlabeled.is_none() {
        return Err(EvalError::Config("semi inference with unlabeled items needs an unlabeled pool".into()));
    }
    if *episodes == 0 {
        return Err(EvalError::Config("episode count must be positive".into()));
    }
    spec.validate()?;

    let results: Vec<(usize, usize, bool)> = (0..*episodes)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(*seed, "eval", &[i as u64]);
            let mut ep = sample_episode(pool, spec, &mut r)?;
            if attach {
                ep = attach_unlabeled(ep, unlabeled.unwrap(), spec, &mut r)?;
            }
            let z = model.embed_array(&dataset.gather(&ep.node_rows()))?;
            let tape = Tape::new();
            let truth = ep.query_labels();
            let p = head.query_probs(&tape, tape.constant(z), &ep.support_labels(), ep.ways(), truth.len())?;
            let pred = argmax_rows(&tape.value(p));
            let correct = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
            Ok((correct, truth.len(), ep.oracle_tainted))
        })
        .collect::<Result<_, EvalError>>()?;

    let accs: Vec<f64> = results.iter().map(|&(c, t, _)| c as f64 / t as f64).collect();
    let t = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / t;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / t;
    let record = MetricsRecord {
        nl: 0,
        variant: String::new(),
        head: head.name().into(),
        mode: mode.as_str().into(),
        ways: spec.ways,
        shots: spec.shots,
        queries: spec.queries,
        unlabeled: if attach { spec.unlabeled } else { 0 },
        acc: mean,
        ci: 1.96 * var.sqrt() / t.sqrt(),
        episodes: *episodes,
        taint: results.iter().any(|r| r.2),
        seed: *seed,
    };
    Ok(EvalOutcome { record, per_episode: results.iter().map(|&(c, t, _)| (c, t)).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{make_synthetic, SynthConfig};
    use crate::model::Activation;

    fn data() -> Dataset {
        make_synthetic(&SynthConfig {
            num_classes: 6,
            samples_per_class: 30,
            ambient_dim: 4,
            cluster_std: 0.1,
            mean_separation: 10.0,
            latent_dim: None,
            seed: 2,
        })
        .unwrap()
    }

    fn setup(mode: InferenceMode) -> EvalSetup {
        EvalSetup { spec: EpisodeSpec::new(3, 2, 3), mode, episodes: 20, seed: 5 }
    }

    #[test]
    fn mode_head_mismatch() {
        let ds = data();
        let m = Model::init(&[4, 4], 2, Activation::Identity, 0).unwrap();
        let pool = class_pool(&ds, &[0, 1, 2, 3]);
        let err = eval_fewshot(&m, &ds, &Head::Proto, &pool, None, &setup(InferenceMode::Transductive));
        assert!(matches!(err, Err(EvalError::ModeMismatch { .. })));
        let err = eval_fewshot(&m, &ds, &Head::Ep(Default::default()), &pool, None, &setup(InferenceMode::Inductive));
        assert!(matches!(err, Err(EvalError::ModeMismatch { .. })));
    }

    #[test]
    fn identity_embedding_on_separated_classes_is_perfect() {
        let ds = data();
        let mut m = Model::init(&[4, 4], 2, Activation::Identity, 0).unwrap();
        m.backbone.layers[0].weight = crate::diffmath::Array::eye(4);
        m.backbone.layers[0].bias.fill(0.0);
        let pool = class_pool(&ds, &[0, 1, 2, 3, 4, 5]);
        for mode in [InferenceMode::Inductive, InferenceMode::Transductive] {
            let out = eval_fewshot(&m, &ds, &mode.default_head(), &pool, None, &setup(mode)).unwrap();
            assert_eq!(out.record.acc, 1.0);
            assert_eq!(out.record.ci, 0.0);
        }
    }

    #[test]
    fn csv_roundtrip_and_header() {
        let r = MetricsRecord {
            nl: 5,
            variant: "plml".into(),
            head: "ep".into(),
            mode: "semi".into(),
            ways: 5,
            shots: 5,
            queries: 15,
            unlabeled: 20,
            acc: 0.8125,
            ci: 0.0125,
            episodes: 600,
            taint: false,
            seed: 3,
        };
        let bytes = metrics_csv(std::slice::from_ref(&r)).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("nl,variant,head,mode,ways,shots,queries,unlabeled,acc,ci,episodes,taint,seed\n"));
        assert_eq!(read_metrics_csv(&bytes).unwrap(), vec![r]);
        let empty = String::from_utf8(metrics_csv(&[]).unwrap()).unwrap();
        assert!(empty.starts_with("nl,variant"));
    }
}
