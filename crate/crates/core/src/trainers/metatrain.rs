use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::{base_index, check_base_classes, PlateauScheduler, PseudoLabeledSet, TraceRow, TrainError};
use crate::datastore::{Dataset, SemiSplit, UnlabeledPool};
use crate::diffmath::{one_hot, Array, Tape, Var};
use crate::heads::Head;
use crate::model::{Bound, Model};
use crate::rng;
use crate::sampler::{attach_unlabeled, sample_episode, ClassPool, Episode, EpisodeSpec, UnlabeledMode};

/// Stage-two settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PLMLConfig {
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub patience: usize,
    pub decay: f64,
    /// Weight of the base-classification term.
    pub gamma: f64,
    pub spec: EpisodeSpec,
    pub head: Head,
    pub val_episodes: usize,
    pub seed: u64,
}

impl Default for PLMLConfig {
    fn default() -> Self {
        Self {
            episodes_per_epoch: 100,
            epochs: 20,
            lr: 0.01,
            patience: 10,
            decay: 10.0,
            gamma: 0.1,
            spec: EpisodeSpec::new(5, 5, 15),
            head: Head::Proto,
            val_episodes: 50,
            seed: 0,
        }
    }
}

impl PLMLConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(TrainError::Config(format!("gamma = {} must be finite and non-negative", self.gamma)));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be at least 1".into()));
        }
        if self.decay.is_nan() || self.decay <= 1.0 {
            return Err(TrainError::Config(format!("decay = {} must exceed 1", self.decay)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr = {} must be finite and non-negative", self.lr)));
        }
        self.spec.validate()?;
        Ok(())
    }
}

/// An episode with its input rows gathered, ready for a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    /// Support, query, then unlabeled features.
    pub x: Array,
    pub ways: usize,
    pub support_labels: Vec<usize>,
    pub query_labels: Vec<usize>,
    /// Base-classifier target of each support and query node, when the
    /// episode classes are base classes.
    pub base_targets: Option<Vec<usize>>,
}

impl EpisodeBatch {
    pub fn new(dataset: &Dataset, episode: &Episode, base_classes: Option<&[usize]>) -> Result<Self, TrainError> {
        let base_targets = match base_classes {
            Some(base) => Some(
                episode.labeled_pool_classes().into_iter().map(|c| base_index(base, c)).collect::<Result<_, _>>()?,
            ),
            None => None,
        };
        Ok(Self {
            x: dataset.gather(&episode.node_rows()),
            ways: episode.ways(),
            support_labels: episode.support_labels(),
            query_labels: episode.query_labels(),
            base_targets,
        })
    }
}

/// Loss terms of one episode.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub fsl: Var,
    pub base: Option<Var>,
}

/// `fsl + γ · base`.
pub fn combine_on_tape(tape: &Tape, fsl: Var, base: Var, gamma: f64) -> Result<Var, TrainError> {
    Ok(tape.add(fsl, tape.scale(base, gamma)?)?)
}

/// Mean query cross-entropy of the head, plus γ times the mean base-class
/// cross-entropy over support and query nodes. The base term is skipped
/// when γ = 0 or the batch has no base targets.
pub fn episode_objective(
    tape: &Tape,
    model: &Model,
    bound: &Bound,
    batch: &EpisodeBatch,
    head: &Head,
    gamma: f64,
) -> Result<Objective, TrainError> {
    let n_s = batch.support_labels.len();
    let n_q = batch.query_labels.len();
    let z = model.embed(tape, bound, tape.constant(batch.x.clone()))?;
    let probs = head.query_probs(tape, z, &batch.support_labels, batch.ways, n_q)?;
    let fsl = tape.cross_entropy(probs, &one_hot(&batch.query_labels, batch.ways))?;
    match &batch.base_targets {
        Some(targets) if gamma != 0.0 => {
            let labeled = tape.slice_rows(z, 0, n_s + n_q)?;
            let p = model.classify_base(tape, bound, labeled)?;
            let base = tape.cross_entropy(p, &one_hot(targets, model.num_base()))?;
            Ok(Objective { total: combine_on_tape(tape, fsl, base, gamma)?, fsl, base: Some(base) })
        }
        _ => Ok(Objective { total: fsl, fsl, base: None }),
    }
}

#[derive(Debug, Clone)]
pub struct MetaTrainOutput {
    pub model: Model,
    pub trace: Vec<TraceRow>,
    /// Training loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// SHA-256 over the row and label content of every training episode.
    pub episode_digest: String,
}

fn digest_episode(h: &mut Sha256, ep: &Episode) {
    let mut put = |v: usize| h.update((v as u64).to_le_bytes());
    for &c in &ep.class_map {
        put(c);
    }
    for &(r, l) in ep.support.iter().chain(&ep.query) {
        put(r);
        put(l);
    }
    for &r in &ep.unlabeled {
        put(r);
    }
}

fn draw_episode(
    pool: &ClassPool,
    unlabeled: Option<&UnlabeledPool>,
    spec: &EpisodeSpec,
    r: &mut rng::Rng,
) -> Result<Episode, TrainError> {
    let ep = sample_episode(pool, spec, r)?;
    if spec.unlabeled == 0 || spec.mode == UnlabeledMode::None {
        return Ok(ep);
    }
    let pool = unlabeled
        .ok_or_else(|| TrainError::Config("episode spec attaches unlabeled items but no pool was given".into()))?;
    Ok(attach_unlabeled(ep, pool, spec, r)?)
}

/// Mean few-shot loss over fixed validation episodes, evaluated in
/// parallel and reduced in episode order.
fn validation_loss(model: &Model, batches: &[EpisodeBatch], head: &Head) -> Result<f64, TrainError> {
    let losses: Vec<f64> = batches
        .par_iter()
        .map(|b| {
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let obj = episode_objective(&tape, model, &bound, b, head, 0.0)?;
            Ok(tape.scalar(obj.fsl))
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Episodic finetuning on `train`, whose classes are global base classes.
/// Validation episodes are drawn once from `val` and reused every epoch;
/// without them the schedule monitors the mean training loss.
pub fn metatrain(
    mut model: Model,
    dataset: &Dataset,
    base_classes: &[usize],
    train: &ClassPool,
    unlabeled: Option<&UnlabeledPool>,
    val: Option<&ClassPool>,
    cfg: &PLMLConfig,
) -> Result<MetaTrainOutput, TrainError> {
    cfg.validate()?;
    check_base_classes(base_classes, model.num_base())?;
    let val_batches = match val {
        Some(pool) if cfg.val_episodes > 0 => {
            let spec = EpisodeSpec::new(cfg.spec.ways, cfg.spec.shots, cfg.spec.queries);
            (0..cfg.val_episodes)
                .map(|i| {
                    let ep = sample_episode(pool, &spec, &mut rng::stream(cfg.seed, "metatrain.val", &[i as u64]))?;
                    EpisodeBatch::new(dataset, &ep, None)
                })
                .collect::<Result<Vec<_>, _>>()?
        }
        _ => Vec::new(),
    };

    let mut sched = PlateauScheduler::new(cfg.lr, cfg.patience, cfg.decay);
    let mut digest = Sha256::new();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(cfg.epochs * cfg.episodes_per_epoch);
    for epoch in 0..cfg.epochs {
        let lr = sched.lr();
        let mut total = 0.0;
        for e in 0..cfg.episodes_per_epoch {
            let mut r = rng::stream(cfg.seed, "metatrain", &[epoch as u64, e as u64]);
            let ep = draw_episode(train, unlabeled, &cfg.spec, &mut r)?;
            digest_episode(&mut digest, &ep);
            let batch = EpisodeBatch::new(dataset, &ep, Some(base_classes))?;
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let obj = episode_objective(&tape, &model, &bound, &batch, &cfg.head, cfg.gamma)?;
            let loss = tape.scalar(obj.total);
            let grads = tape.backward(obj.total)?;
            model.apply_gradients(&grads, lr)?;
            total += loss;
            step_losses.push(loss);
        }
        let train_loss = if cfg.episodes_per_epoch > 0 { total / cfg.episodes_per_epoch as f64 } else { 0.0 };
        let val_loss = if val_batches.is_empty() { None } else { Some(validation_loss(&model, &val_batches, &cfg.head)?) };
        sched.step(val_loss.unwrap_or(train_loss));
        trace.push(TraceRow { epoch, phase: "metatrain", lr, loss: train_loss, val_loss });
    }
    Ok(MetaTrainOutput { model, trace, step_losses, episode_digest: hex::encode(digest.finalize()) })
}

/// Labeled items with their true classes, unlabeled items with their
/// pseudo-labels, all as global class indices.
pub fn plml_pool(split: &SemiSplit, pseudo: &PseudoLabeledSet, base_classes: &[usize]) -> Result<ClassPool, TrainError> {
    let mut pairs = split.labeled().to_vec();
    for it in &pseudo.items {
        let class = *base_classes
            .get(it.label)
            .ok_or_else(|| TrainError::Config(format!("pseudo-label {} out of range", it.label)))?;
        pairs.push((it.row, class));
    }
    Ok(ClassPool::from_pairs(pairs))
}

/// Meta-training on the labeled set joined with the pseudo-labeled set.
pub fn metatrain_plml(
    model: Model,
    dataset: &Dataset,
    split: &SemiSplit,
    pseudo: &PseudoLabeledSet,
    base_classes: &[usize],
    val: Option<&ClassPool>,
    cfg: &PLMLConfig,
) -> Result<MetaTrainOutput, TrainError> {
    pseudo.validate(split, model.num_base())?;
    let pool = plml_pool(split, pseudo, base_classes)?;
    metatrain(model, dataset, base_classes, &pool, Some(split.unlabeled()), val, cfg)
}
