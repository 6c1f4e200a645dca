use ndarray::Axis;
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{base_index, check_base_classes, TraceRow, TrainError};
use crate::datastore::{Dataset, SemiSplit};
use crate::diffmath::{argmax_rows, one_hot, Array};
use crate::model::Model;
use crate::rng;

/// Stage-one settings. `alpha` weighs the unlabeled consistency term,
/// `beta` the L2 regularizer; noise scales are relative to the per-feature
/// standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct SSLConfig {
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub sigma_weak: f64,
    pub sigma_strong: f64,
    pub seed: u64,
}

impl Default for SSLConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_labeled: 32,
            batch_unlabeled: 64,
            lr: 0.05,
            alpha: 1.0,
            beta: 0.0,
            tau: 0.95,
            sigma_weak: 0.05,
            sigma_strong: 0.2,
            seed: 0,
        }
    }
}

impl SSLConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau = {} outside (0, 1]", self.tau));
        }
        for (k, v) in [("alpha", self.alpha), ("beta", self.beta), ("sigma_weak", self.sigma_weak), ("sigma_strong", self.sigma_strong)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} = {v} must be finite and non-negative"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be finite and non-negative", self.lr));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return bad("batch sizes must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub model: Model,
    pub trace: Vec<TraceRow>,
}

/// Mean cross-entropy of the base classifier over the labeled pool.
pub fn pretrain_supervised(
    dataset: &Dataset,
    split: &SemiSplit,
    base_classes: &[usize],
    model: Model,
    cfg: &SSLConfig,
) -> Result<PretrainOutput, TrainError> {
    run(dataset, split, base_classes, model, cfg, false)
}

/// Supervised loss plus a confidence-masked consistency term on the
/// unlabeled pool: hard targets come from weakly perturbed inputs and are
/// fitted on strongly perturbed copies. Only unlabeled row indices are used.
pub fn pretrain_selftrain(
    dataset: &Dataset,
    split: &SemiSplit,
    base_classes: &[usize],
    model: Model,
    cfg: &SSLConfig,
) -> Result<PretrainOutput, TrainError> {
    run(dataset, split, base_classes, model, cfg, true)
}

/// Per-feature population standard deviation over `rows`.
fn feature_std(dataset: &Dataset, rows: &[usize]) -> Array {
    let x = dataset.gather(rows);
    let std = x.std_axis(Axis(0), 0.0);
    std.insert_axis(Axis(0))
}

fn perturb(x: &Array, std: &Array, sigma: f64, r: &mut rng::Rng) -> Array {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        for (v, s) in row.iter_mut().zip(std.iter()) {
            let e: f64 = r.sample(StandardNormal);
            *v += sigma * s * e;
        }
    }
    out
}

fn run(
    dataset: &Dataset,
    split: &SemiSplit,
    base_classes: &[usize],
    mut model: Model,
    cfg: &SSLConfig,
    self_train: bool,
) -> Result<PretrainOutput, TrainError> {
    cfg.validate()?;
    check_base_classes(base_classes, model.num_base())?;
    let labeled: Vec<(usize, usize)> = split
        .labeled()
        .iter()
        .map(|&(row, c)| Ok((row, base_index(base_classes, c)?)))
        .collect::<Result<_, TrainError>>()?;
    let mut classes: Vec<usize> = labeled.iter().map(|p| p.1).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(TrainError::InsufficientData(format!(
            "labeled pool covers {} class(es), need at least 2",
            classes.len()
        )));
    }
    let nb = model.num_base();
    let unlabeled = split.unlabeled_rows();
    let use_unlabeled = self_train && !unlabeled.is_empty();
    let std = if use_unlabeled {
        let mut rows: Vec<usize> = labeled.iter().map(|p| p.0).collect();
        rows.extend_from_slice(unlabeled);
        Some(feature_std(dataset, &rows))
    } else {
        None
    };

    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "pretrain", &[epoch as u64]));
        let mut total = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_labeled).enumerate() {
            let rows: Vec<usize> = chunk.iter().map(|&i| labeled[i].0).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| labeled[i].1).collect();
            let tape = crate::diffmath::Tape::new();
            let bound = model.bind(&tape);
            let z = model.embed(&tape, &bound, tape.constant(dataset.gather(&rows)))?;
            let p = model.classify_base(&tape, &bound, z)?;
            let mut loss = tape.cross_entropy(p, &one_hot(&targets, nb))?;

            if let Some(std) = &std {
                let mut r = rng::stream(cfg.seed, "pretrain.unlabeled", &[epoch as u64, step as u64]);
                let take = cfg.batch_unlabeled.min(unlabeled.len());
                let picked: Vec<usize> = index::sample(&mut r, unlabeled.len(), take).iter().map(|i| unlabeled[i]).collect();
                let xu = dataset.gather(&picked);
                let weak = perturb(&xu, std, cfg.sigma_weak, &mut r);
                let strong = perturb(&xu, std, cfg.sigma_strong, &mut r);
                // targets come from a separate forward pass and carry no gradient
                let pw = model.base_probs(&weak)?;
                let hard = argmax_rows(&pw);
                let mask: Vec<f64> =
                    pw.rows().into_iter().zip(&hard).map(|(row, &j)| f64::from(u8::from(row[j] >= cfg.tau))).collect();
                if mask.iter().any(|&m| m > 0.0) {
                    let zs = model.embed(&tape, &bound, tape.constant(strong))?;
                    let ps = model.classify_base(&tape, &bound, zs)?;
                    let lu = tape.weighted_cross_entropy(ps, &one_hot(&hard, nb), &mask)?;
                    loss = tape.add(loss, tape.scale(lu, cfg.alpha)?)?;
                }
            }
            if self_train && cfg.beta > 0.0 {
                let reg = model.l2(&tape, &bound)?;
                loss = tape.add(loss, tape.scale(reg, cfg.beta)?)?;
            }

            total += tape.scalar(loss);
            steps += 1;
            let grads = tape.backward(loss)?;
            model.apply_gradients(&grads, cfg.lr)?;
        }
        let phase = if self_train { "selftrain" } else { "pretrain" };
        trace.push(TraceRow { epoch, phase, lr: cfg.lr, loss: total / steps as f64, val_loss: None });
    }
    Ok(PretrainOutput { model, trace })
}
