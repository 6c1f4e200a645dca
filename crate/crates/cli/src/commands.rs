use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plml::datastore::{
    load_dataset, make_synthetic, partition_classes, save_dataset, split_semi, ClassPartition, Dataset,
    SemiSplit,
};
use plml::eval::{
    class_pool, eval_fewshot, metrics_csv, run_degradation_sweep, run_selection_comparison, unlabeled_pool, EvalError,
    EvalSetup, InferenceMode, MetricsRecord, SelectionConfig, SweepConfig,
};
use plml::heads::Head;
use plml::model::{Checkpoint, Model, ModelError};
use plml::rng::derive_seed;
use plml::sampler::UnlabeledMode;
use plml::trainers::{
    metatrain_plml, model_digest, pretrain_selftrain, pretrain_supervised, pseudo_label, trace_csv, PLMLConfig,
    SSLConfig, TrainError,
};

use crate::artifacts::{self, Manifest};
use crate::config::Loaded;
use crate::CliError;

pub const PARTITION: &str = "partition.csv";
pub const SPLIT: &str = "split.csv";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const PRETRAIN_TRACE: &str = "pretrain_trace.csv";
pub const PSEUDO: &str = "pseudo.csv";
pub const METATRAIN_CKPT: &str = "metatrain.ckpt";
pub const METATRAIN_TRACE: &str = "metatrain_trace.csv";
pub const METRICS: &str = "metrics.csv";
pub const SWEEP: &str = "sweep.csv";
pub const SELECTION: &str = "selection.csv";
pub const SELECTION_PARTITION: &str = "selection_partition.csv";

fn train_err(stage: &'static str) -> impl Fn(TrainError) -> CliError {
    move |e| match e.math() {
        Some(m) => CliError::Numeric { stage, detail: m.to_string() },
        None => CliError::Failed { stage, detail: e.to_string() },
    }
}

fn eval_err(stage: &'static str) -> impl Fn(EvalError) -> CliError {
    move |e| match e.math() {
        Some(m) => CliError::Numeric { stage, detail: m.to_string() },
        None => CliError::Failed { stage, detail: e.to_string() },
    }
}

fn model_err(stage: &'static str) -> impl Fn(ModelError) -> CliError {
    move |e| match e {
        ModelError::Math(m) => CliError::Numeric { stage, detail: m.to_string() },
        e => CliError::Failed { stage, detail: e.to_string() },
    }
}

fn failed(stage: &'static str) -> impl Fn(plml::datastore::DataError) -> CliError {
    move |e| CliError::Failed { stage, detail: e.to_string() }
}

/// Shared state of one command invocation.
pub struct Ctx {
    pub loaded: Loaded,
    out: PathBuf,
    manifest: Manifest,
}

impl Ctx {
    pub fn new(loaded: Loaded, command: &'static str) -> Self {
        let out = loaded.out_dir();
        let manifest = Manifest::new(command, loaded.hash(), loaded.config.seed);
        Self { loaded, out, manifest }
    }

    fn seed(&self, tag: &str) -> u64 {
        derive_seed(self.loaded.config.seed, tag, &[])
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn input(&mut self, path: &Path, what: &str) -> Result<Vec<u8>, CliError> {
        let bytes = artifacts::read(path, what)?;
        self.manifest.input(path, &bytes);
        Ok(bytes)
    }

    fn output(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        artifacts::write(path, bytes, self.manifest.command)?;
        self.manifest.output(path, bytes);
        log::info!("wrote {}", path.display());
        Ok(())
    }

    pub fn finish(self) -> Result<(), CliError> {
        self.manifest.save(&self.out)?;
        Ok(())
    }

    fn dataset(&mut self) -> Result<Dataset, CliError> {
        let (fp, lp) = (self.loaded.features_path(), self.loaded.labels_path());
        self.input(&fp, "dataset feature file (run `synth` first)")?;
        self.input(&lp, "dataset label file")?;
        let ds = load_dataset(&fp, &lp).map_err(failed("load dataset"))?;
        if ds.dim() != self.loaded.config.model.widths[0] {
            return Err(CliError::Config(format!(
                "model.widths: input width {} differs from dataset dimension {}",
                self.loaded.config.model.widths[0],
                ds.dim()
            )));
        }
        Ok(ds)
    }

    fn partition(&mut self, ds: &Dataset) -> Result<ClassPartition, CliError> {
        let bytes = self.input(&self.path(PARTITION), "class partition (run `split` first)")?;
        artifacts::read_partition(ds, &bytes)
    }

    fn split(&mut self, ds: &Dataset) -> Result<SemiSplit, CliError> {
        let bytes = self.input(&self.path(SPLIT), "split file (run `split` first)")?;
        artifacts::read_split(ds, &bytes)
    }

    fn checkpoint(&mut self, name: &str, what: &str) -> Result<Model, CliError> {
        let path = self.path(name);
        let bytes = self.input(&path, what)?;
        let ck = Checkpoint::from_bytes(&bytes).map_err(model_err("load checkpoint"))?;
        if let Some(w) = ck.config_hash_warning(&self.manifest.config_hash) {
            log::warn!("{}: {w}", path.display());
        }
        ck.to_model().map_err(model_err("load checkpoint"))
    }

    fn save_checkpoint(&mut self, name: &str, model: &Model, stage: &str) -> Result<(), CliError> {
        let meta: BTreeMap<String, String> = [
            ("config_hash".to_string(), self.manifest.config_hash.clone()),
            ("seed".to_string(), self.loaded.config.seed.to_string()),
            ("stage".to_string(), stage.to_string()),
        ]
        .into();
        let bytes = Checkpoint::from_model(model, meta).to_bytes().map_err(model_err("save checkpoint"))?;
        self.output(&self.path(name), &bytes)
    }

    fn val_pool(&self, ds: &Dataset, partition: &ClassPartition, plml: &PLMLConfig) -> Option<plml::sampler::ClassPool> {
        let pool = class_pool(ds, &partition.val);
        if pool.classes().len() >= plml.spec.ways {
            Some(pool)
        } else {
            log::info!("validation pool has {} classes; scheduling on training loss", pool.classes().len());
            None
        }
    }
}

pub fn synth(mut ctx: Ctx) -> Result<(), CliError> {
    let cfg = ctx.loaded.config.synth_config(ctx.seed("synth"))?;
    let ds = make_synthetic(&cfg).map_err(failed("synth"))?;
    let (fp, lp) = (ctx.loaded.features_path(), ctx.loaded.labels_path());
    for p in [&fp, &lp] {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Failed { stage: "synth", detail: e.to_string() })?;
        }
    }
    save_dataset(&ds, &fp, &lp).map_err(failed("synth"))?;
    for p in [fp, lp] {
        let bytes = std::fs::read(&p).map_err(|e| CliError::Failed { stage: "synth", detail: e.to_string() })?;
        ctx.manifest.output(&p, &bytes);
    }
    log::info!("{} samples, {} classes, dimension {}", ds.len(), ds.num_classes(), ds.dim());
    ctx.finish()
}

pub fn split(mut ctx: Ctx) -> Result<(), CliError> {
    let ds = ctx.dataset()?;
    let s = ctx.loaded.config.split.clone();
    let partition = partition_classes(&ds, (s.base, s.val, s.novel), ctx.seed("partition")).map_err(failed("partition"))?;
    let split = split_semi(&ds, &partition.base, s.n_labeled, s.n_test, ctx.seed("split")).map_err(failed("split"))?;
    log::info!(
        "{} labeled, {} unlabeled, {} test",
        split.labeled().len(),
        split.unlabeled_rows().len(),
        split.test().len()
    );
    ctx.output(&ctx.path(PARTITION), &artifacts::partition_csv(&ds, &partition))?;
    ctx.output(&ctx.path(SPLIT), &artifacts::split_csv(&ds, &split))?;
    ctx.finish()
}

pub fn pretrain(mut ctx: Ctx) -> Result<(), CliError> {
    let ds = ctx.dataset()?;
    let partition = ctx.partition(&ds)?;
    let split = ctx.split(&ds)?;
    let c = &ctx.loaded.config;
    let model = Model::init(&c.model.widths, partition.base.len(), c.activation()?, ctx.seed("init"))
        .map_err(model_err("pretrain"))?;
    let ssl = SSLConfig { seed: ctx.seed("pretrain"), ..c.ssl()? };
    let out = if c.pretrain_selftrain()? {
        pretrain_selftrain(&ds, &split, &partition.base, model, &ssl)
    } else {
        pretrain_supervised(&ds, &split, &partition.base, model, &ssl)
    }
    .map_err(train_err("pretrain"))?;
    ctx.save_checkpoint(PRETRAIN_CKPT, &out.model, "pretrain")?;
    ctx.output(&ctx.path(PRETRAIN_TRACE), trace_csv(&out.trace).as_bytes())?;
    ctx.finish()
}

pub fn pseudolabel(mut ctx: Ctx) -> Result<(), CliError> {
    let ds = ctx.dataset()?;
    let partition = ctx.partition(&ds)?;
    let split = ctx.split(&ds)?;
    let model = ctx.checkpoint(PRETRAIN_CKPT, "pre-trained checkpoint (run `pretrain` first)")?;
    let set = pseudo_label(&model, &ds, &split).map_err(train_err("pseudolabel"))?;
    log::info!("{} pseudo-labels", set.items.len());
    ctx.output(&ctx.path(PSEUDO), &artifacts::pseudo_csv(&ds, &set, &partition.base))?;
    ctx.finish()
}

pub fn metatrain(mut ctx: Ctx) -> Result<(), CliError> {
    let ds = ctx.dataset()?;
    let partition = ctx.partition(&ds)?;
    let split = ctx.split(&ds)?;
    let model = ctx.checkpoint(PRETRAIN_CKPT, "pre-trained checkpoint (run `pretrain` first)")?;
    let bytes = ctx.input(&ctx.path(PSEUDO), "pseudo-label file (run `pseudolabel` first)")?;
    let pseudo = artifacts::read_pseudo(&ds, &bytes, &partition.base)?;
    let digest = model_digest(&model);
    if pseudo.source_hash != digest {
        log::warn!("pseudo-labels were produced by model {}, checkpoint is {digest}", pseudo.source_hash);
    }
    let plml = PLMLConfig { seed: ctx.seed("metatrain"), ..ctx.loaded.config.plml()? };
    let val = ctx.val_pool(&ds, &partition, &plml);
    let out = metatrain_plml(model, &ds, &split, &pseudo, &partition.base, val.as_ref(), &plml)
        .map_err(train_err("metatrain"))?;
    ctx.save_checkpoint(METATRAIN_CKPT, &out.model, "metatrain")?;
    ctx.output(&ctx.path(METATRAIN_TRACE), trace_csv(&out.trace).as_bytes())?;
    ctx.finish()
}

pub fn eval(mut ctx: Ctx) -> Result<(), CliError> {
    let ds = ctx.dataset()?;
    let partition = ctx.partition(&ds)?;
    let c = ctx.loaded.config.clone();
    let (model, variant) = if c.eval.checkpoint == "metatrain" {
        (ctx.checkpoint(METATRAIN_CKPT, "meta-trained checkpoint (run `metatrain` first)")?, "plml")
    } else {
        let v = if c.pretrain_selftrain()? { "selftrain" } else { "base" };
        (ctx.checkpoint(PRETRAIN_CKPT, "pre-trained checkpoint (run `pretrain` first)")?, v)
    };
    let novel = class_pool(&ds, &partition.novel);
    let unlabeled = unlabeled_pool(&ds, &partition.novel);
    let base_spec = c.eval_spec()?;
    let mut rows = Vec::new();
    for mode in c.modes()? {
        let head = match mode {
            InferenceMode::Inductive => Head::Proto,
            _ => Head::Ep(c.ep()?),
        };
        let semi = mode == InferenceMode::Semi && c.eval.unlabeled > 0;
        let spec = if semi { base_spec.with_unlabeled(c.eval.unlabeled, UnlabeledMode::Practical) } else { base_spec };
        let setup = EvalSetup { spec, mode, episodes: c.eval.episodes, seed: ctx.seed("eval") };
        let out = eval_fewshot(&model, &ds, &head, &novel, semi.then_some(&unlabeled), &setup).map_err(eval_err("eval"))?;
        log::info!("{}: accuracy {:.4} ± {:.4}", mode.as_str(), out.record.acc, out.record.ci);
        rows.push(MetricsRecord { seed: c.seed, ..out.record.tagged(c.split.n_labeled, variant) });
    }
    let csv = metrics_csv(&rows).map_err(eval_err("eval"))?;
    ctx.output(&ctx.path(METRICS), &csv)?;
    ctx.finish()
}

pub fn sweep(mut ctx: Ctx) -> Result<(), CliError> {
    let ds = ctx.dataset()?;
    let partition = ctx.partition(&ds)?;
    let c = ctx.loaded.config.clone();
    let cfg = SweepConfig {
        pipeline: c.pipeline()?,
        n_labeled: c.eval.n_labeled.clone(),
        variants: c.variants()?,
        modes: c.modes()?,
        seed: c.seed,
    };
    let rows = run_degradation_sweep(&ds, &partition, &cfg).map_err(eval_err("sweep"))?;
    let csv = metrics_csv(&rows).map_err(eval_err("sweep"))?;
    ctx.output(&ctx.path(SWEEP), &csv)?;
    ctx.finish()
}

pub fn compare_selection(mut ctx: Ctx) -> Result<(), CliError> {
    let ds = ctx.dataset()?;
    let c = ctx.loaded.config.clone();
    let s = &c.selection;
    let partition = partition_classes(&ds, (s.base, s.val, s.novel), ctx.seed("selection.partition"))
        .map_err(failed("compare-selection"))?;
    let mut pipeline = c.pipeline()?;
    pipeline.ssl.epochs = s.pretrain_epochs;
    pipeline.plml.epochs = s.plml_epochs;
    pipeline.unlabeled = s.unlabeled;
    let cfg = SelectionConfig { pipeline, n_labeled: s.n_labeled, repeats: s.repeats, seed: c.seed };
    let rows = run_selection_comparison(&ds, &partition, &cfg).map_err(eval_err("compare-selection"))?;
    ctx.output(&ctx.path(SELECTION_PARTITION), &artifacts::partition_csv(&ds, &partition))?;
    let csv = metrics_csv(&rows).map_err(eval_err("compare-selection"))?;
    ctx.output(&ctx.path(SELECTION), &csv)?;
    ctx.finish()
}
