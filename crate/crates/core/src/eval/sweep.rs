use super::{class_pool, eval_fewshot, unlabeled_pool, EvalError, EvalSetup, InferenceMode, MetricsRecord};
use crate::datastore::{split_semi, ClassPartition, Dataset};
use crate::heads::Head;
use crate::model::{Activation, Model};
use crate::rng::derive_seed;
use crate::sampler::{ClassPool, EpisodeSpec, UnlabeledMode};
use crate::trainers::{
    metatrain, metatrain_plml, pretrain_selftrain, pretrain_supervised, pseudo_label, PLMLConfig, SSLConfig,
};

/// Pipeline pieces shared by both experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub n_test: usize,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub ssl: SSLConfig,
    pub plml: PLMLConfig,
    /// Ways, shots and queries of evaluation tasks.
    pub eval_spec: EpisodeSpec,
    pub episodes: usize,
    /// Unlabeled items per class in semi inference.
    pub unlabeled: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Supervised pre-training on the labeled pool only.
    Base,
    /// Self-training, pseudo-labeling, then episodic finetuning.
    Plml,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Plml => "plml",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "base" => Some(Variant::Base),
            "plml" => Some(Variant::Plml),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub pipeline: PipelineConfig,
    pub n_labeled: Vec<usize>,
    pub variants: Vec<Variant>,
    pub modes: Vec<InferenceMode>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig {
    pub pipeline: PipelineConfig,
    pub n_labeled: usize,
    pub repeats: usize,
    pub seed: u64,
}

/// Sub-seeds of one run. Every N_l and variant shares them, so rows differ
/// only in what the pipeline does, and evaluation tasks are paired.
struct Seeds {
    split: u64,
    init: u64,
    ssl: u64,
    plml: u64,
    eval: u64,
}

impl Seeds {
    fn new(master: u64) -> Self {
        Self {
            split: derive_seed(master, "split", &[]),
            init: derive_seed(master, "init", &[]),
            ssl: derive_seed(master, "pretrain", &[]),
            plml: derive_seed(master, "metatrain", &[]),
            eval: derive_seed(master, "eval", &[]),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    model: &Model,
    dataset: &Dataset,
    partition: &ClassPartition,
    p: &PipelineConfig,
    mode: InferenceMode,
    head: Head,
    attach: UnlabeledMode,
    seed: u64,
) -> Result<MetricsRecord, EvalError> {
    let novel = class_pool(dataset, &partition.novel);
    let semi = mode == InferenceMode::Semi && p.unlabeled > 0;
    let spec = if semi { p.eval_spec.with_unlabeled(p.unlabeled, attach) } else { p.eval_spec };
    let pool = semi.then(|| unlabeled_pool(dataset, &partition.novel));
    let setup = EvalSetup { spec, mode, episodes: p.episodes, seed };
    Ok(eval_fewshot(model, dataset, &head, &novel, pool.as_ref(), &setup)?.record)
}

/// Rows ordered by N_l, then variant, then mode.
pub fn run_degradation_sweep(
    dataset: &Dataset,
    partition: &ClassPartition,
    cfg: &SweepConfig,
) -> Result<Vec<MetricsRecord>, EvalError> {
    let p = &cfg.pipeline;
    let seeds = Seeds::new(cfg.seed);
    let base = &partition.base;
    let val = class_pool(dataset, &partition.val);
    let val = (val.classes().len() >= p.plml.spec.ways).then_some(&val);
    let init = Model::init(&p.widths, base.len(), p.activation, seeds.init)?;
    let ssl = SSLConfig { seed: seeds.ssl, ..p.ssl.clone() };
    let plml = PLMLConfig { seed: seeds.plml, ..p.plml.clone() };
    let mut rows = Vec::new();
    for &nl in &cfg.n_labeled {
        let split = split_semi(dataset, base, nl, p.n_test, seeds.split)?;
        for &variant in &cfg.variants {
            let model = match variant {
                Variant::Base => pretrain_supervised(dataset, &split, base, init.clone(), &ssl)?.model,
                Variant::Plml => {
                    let pre = pretrain_selftrain(dataset, &split, base, init.clone(), &ssl)?.model;
                    let pseudo = pseudo_label(&pre, dataset, &split)?;
                    metatrain_plml(pre, dataset, &split, &pseudo, base, val, &plml)?.model
                }
            };
            for &mode in &cfg.modes {
                let rec = evaluate(&model, dataset, partition, p, mode, mode.default_head(), UnlabeledMode::Practical, seeds.eval)?;
                log::info!("nl={nl} variant={} mode={} acc={:.4}", variant.as_str(), mode.as_str(), rec.acc);
                rows.push(MetricsRecord { seed: cfg.seed, ..rec.tagged(nl, variant.as_str()) });
            }
        }
    }
    Ok(rows)
}

/// Meta-trains and evaluates the prototype-refinement head twice per repeat,
/// once with class-aware (oracle) unlabeled attachment and once with
/// practical attachment, in both training and evaluation. Everything else,
/// including the sampled support and query sets, is shared.
pub fn run_selection_comparison(
    dataset: &Dataset,
    partition: &ClassPartition,
    cfg: &SelectionConfig,
) -> Result<Vec<MetricsRecord>, EvalError> {
    let p = &cfg.pipeline;
    if p.unlabeled == 0 {
        return Err(EvalError::Config("selection comparison needs unlabeled items per class > 0".into()));
    }
    let base = &partition.base;
    let val = class_pool(dataset, &partition.val);
    let val = (val.classes().len() >= p.plml.spec.ways).then_some(&val);
    let mut rows = Vec::new();
    for r in 0..cfg.repeats {
        let master = derive_seed(cfg.seed, "select", &[r as u64]);
        let seeds = Seeds::new(master);
        let split = split_semi(dataset, base, cfg.n_labeled, p.n_test, seeds.split)?;
        if !split.oracle_enabled() {
            return Err(crate::datastore::DataError::OracleDisabled.into());
        }
        let init = Model::init(&p.widths, base.len(), p.activation, seeds.init)?;
        let ssl = SSLConfig { seed: seeds.ssl, ..p.ssl.clone() };
        let pre = pretrain_supervised(dataset, &split, base, init, &ssl)?.model;
        let labeled = ClassPool::from_pairs(split.labeled().iter().copied());
        for attach in [UnlabeledMode::ClassAwareOracle, UnlabeledMode::Practical] {
            let plml = PLMLConfig {
                seed: seeds.plml,
                head: Head::SemiProto,
                spec: p.plml.spec.with_unlabeled(p.unlabeled, attach),
                ..p.plml.clone()
            };
            let model = metatrain(pre.clone(), dataset, base, &labeled, Some(split.unlabeled()), val, &plml)?.model;
            let rec = evaluate(&model, dataset, partition, p, InferenceMode::Semi, Head::SemiProto, attach, seeds.eval)?;
            log::info!("repeat={r} attach={} acc={:.4}", attach.as_str(), rec.acc);
            rows.push(MetricsRecord { seed: master, ..rec.tagged(cfg.n_labeled, attach.as_str()) });
        }
    }
    Ok(rows)
}
