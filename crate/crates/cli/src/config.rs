//! Experiment configuration: a sectioned TOML document. Every section and
//! key is optional and falls back to the desk defaults; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use plml::datastore::SynthConfig;
use plml::eval::{InferenceMode, PipelineConfig, Variant};
use plml::heads::{EpConfig, Head, ScoreNormalization};
use plml::model::Activation;
use plml::sampler::{EpisodeSpec, UnlabeledMode};
use plml::trainers::{PLMLConfig, SSLConfig};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub paths: Paths,
    pub synth: Synth,
    pub split: Split,
    pub model: ModelSection,
    pub pretrain: Pretrain,
    pub plml: Plml,
    pub eval: Eval,
    pub selection: Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Output directory; relative paths resolve against the config file.
    pub out: String,
    /// Feature file. Defaults to `dataset.bin` in the output directory.
    pub features: Option<String>,
    /// Label CSV. Defaults to `labels.csv` in the output directory.
    pub labels: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Synth {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub ambient_dim: usize,
    pub cluster_std: f64,
    pub mean_separation: f64,
    /// Width of the latent subspace holding the class means; 0 uses the
    /// full ambient space.
    pub latent_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Split {
    pub n_labeled: usize,
    pub n_test: usize,
    pub base: usize,
    pub val: usize,
    pub novel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub widths: Vec<usize>,
    pub activation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Pretrain {
    /// `base` (supervised only) or `selftrain`.
    pub method: String,
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub sigma_weak: f64,
    pub sigma_strong: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Plml {
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub patience: usize,
    pub decay: f64,
    pub gamma: f64,
    /// `proto`, `ep` or `semiproto`.
    pub head: String,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    /// Unlabeled items attached per episode class (practical draw).
    pub unlabeled: usize,
    pub val_episodes: usize,
    pub alpha_embed: f64,
    pub alpha_label: f64,
    /// `softmax` or `rowsum`.
    pub normalization: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Eval {
    /// Which checkpoint `eval` scores: `metatrain` or `pretrain`.
    pub checkpoint: String,
    pub modes: Vec<String>,
    pub episodes: usize,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    /// Unlabeled items per class in semi mode.
    pub unlabeled: usize,
    /// Labels-per-class grid of `sweep`.
    pub n_labeled: Vec<usize>,
    pub variants: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Selection {
    pub n_labeled: usize,
    pub unlabeled: usize,
    pub repeats: usize,
    pub base: usize,
    pub val: usize,
    pub novel: usize,
    pub pretrain_epochs: usize,
    pub plml_epochs: usize,
}

impl Default for Paths {
    fn default() -> Self {
        Self { out: "out".into(), features: None, labels: None }
    }
}

impl Default for Synth {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            num_classes: d.num_classes,
            samples_per_class: d.samples_per_class,
            ambient_dim: d.ambient_dim,
            cluster_std: d.cluster_std,
            mean_separation: d.mean_separation,
            latent_dim: d.latent_dim.unwrap_or(0),
        }
    }
}

impl Default for Split {
    fn default() -> Self {
        Self { n_labeled: 5, n_test: 20, base: 10, val: 5, novel: 5 }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { widths: vec![64, 32], activation: "relu".into() }
    }
}

impl Default for Pretrain {
    fn default() -> Self {
        let d = SSLConfig::default();
        Self {
            method: "selftrain".into(),
            epochs: d.epochs,
            batch_labeled: d.batch_labeled,
            batch_unlabeled: d.batch_unlabeled,
            lr: d.lr,
            alpha: d.alpha,
            beta: d.beta,
            tau: d.tau,
            sigma_weak: d.sigma_weak,
            sigma_strong: d.sigma_strong,
        }
    }
}

impl Default for Plml {
    fn default() -> Self {
        let d = PLMLConfig::default();
        let ep = EpConfig::default();
        Self {
            episodes_per_epoch: d.episodes_per_epoch,
            epochs: d.epochs,
            lr: d.lr,
            patience: d.patience,
            decay: d.decay,
            gamma: d.gamma,
            head: d.head.name().into(),
            ways: d.spec.ways,
            shots: d.spec.shots,
            queries: d.spec.queries,
            unlabeled: 0,
            val_episodes: d.val_episodes,
            alpha_embed: ep.alpha_embed,
            alpha_label: ep.alpha_label,
            normalization: "softmax".into(),
        }
    }
}

impl Default for Eval {
    fn default() -> Self {
        Self {
            checkpoint: "metatrain".into(),
            modes: vec!["inductive".into(), "transductive".into(), "semi".into()],
            episodes: 600,
            ways: 5,
            shots: 5,
            queries: 15,
            unlabeled: 5,
            n_labeled: vec![2, 5, 20],
            variants: vec!["base".into(), "plml".into()],
        }
    }
}

impl Default for Selection {
    fn default() -> Self {
        Self { n_labeled: 20, unlabeled: 5, repeats: 3, base: 7, val: 5, novel: 8, pretrain_epochs: 200, plml_epochs: 10 }
    }
}

fn bad(key: &str, detail: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {detail}"))
}

fn positive(key: &str, v: usize) -> Result<(), CliError> {
    if v == 0 {
        return Err(bad(key, "must be positive"));
    }
    Ok(())
}

/// A loaded configuration and where it came from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: Config,
    pub base_dir: PathBuf,
}

impl Loaded {
    pub fn read(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: Config =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
        if let Some(s) = seed {
            config.seed = s;
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut loaded = Self { config, base_dir };
        if let Some(o) = out {
            // an explicit --out is taken relative to the working directory
            let abs = std::env::current_dir().map(|d| d.join(o)).unwrap_or_else(|_| o.to_path_buf());
            loaded.config.paths.out = abs.to_string_lossy().into_owned();
        }
        loaded.config.validate()?;
        Ok(loaded)
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.out)
    }

    pub fn features_path(&self) -> PathBuf {
        match &self.config.paths.features {
            Some(f) => self.resolve(f),
            None => self.out_dir().join("dataset.bin"),
        }
    }

    pub fn labels_path(&self) -> PathBuf {
        match &self.config.paths.labels {
            Some(f) => self.resolve(f),
            None => self.out_dir().join("labels.csv"),
        }
    }

    /// SHA-256 of the effective configuration. The output directory is left
    /// out so relocated reruns hash the same.
    pub fn hash(&self) -> String {
        let mut c = self.config.clone();
        c.paths = Paths::default();
        let text = toml::to_string(&c).expect("config serializes");
        plml::rng::sha256_hex(text.as_bytes())
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), CliError> {
        self.synth_config(0)?;
        self.activation()?;
        self.ssl()?;
        self.pretrain_selftrain()?;
        self.plml()?.validate().map_err(|e| bad("plml", e))?;
        self.modes()?;
        self.variants()?;
        self.eval_spec()?;
        let s = &self.split;
        positive("split.n_labeled", s.n_labeled)?;
        positive("split.base", s.base)?;
        positive("split.novel", s.novel)?;
        if self.model.widths.len() < 2 {
            return Err(bad("model.widths", "needs an input and at least one layer width"));
        }
        if self.model.widths[0] != self.synth.ambient_dim {
            return Err(bad(
                "model.widths",
                format!("input width {} differs from synth.ambient_dim {}", self.model.widths[0], self.synth.ambient_dim),
            ));
        }
        positive("eval.episodes", self.eval.episodes)?;
        if self.eval.n_labeled.is_empty() || self.eval.n_labeled.contains(&0) {
            return Err(bad("eval.n_labeled", "needs positive entries"));
        }
        if !matches!(self.eval.checkpoint.as_str(), "metatrain" | "pretrain") {
            return Err(bad("eval.checkpoint", format!("{:?} is not `metatrain` or `pretrain`", self.eval.checkpoint)));
        }
        let sel = &self.selection;
        positive("selection.repeats", sel.repeats)?;
        positive("selection.unlabeled", sel.unlabeled)?;
        positive("selection.n_labeled", sel.n_labeled)?;
        Ok(())
    }

    pub fn synth_config(&self, seed: u64) -> Result<SynthConfig, CliError> {
        let s = &self.synth;
        positive("synth.num_classes", s.num_classes)?;
        positive("synth.samples_per_class", s.samples_per_class)?;
        positive("synth.ambient_dim", s.ambient_dim)?;
        if !(s.cluster_std.is_finite() && s.cluster_std >= 0.0) {
            return Err(bad("synth.cluster_std", "must be finite and non-negative"));
        }
        if !(s.mean_separation.is_finite() && s.mean_separation >= 0.0) {
            return Err(bad("synth.mean_separation", "must be finite and non-negative"));
        }
        if s.latent_dim > s.ambient_dim {
            return Err(bad("synth.latent_dim", format!("exceeds ambient_dim {}", s.ambient_dim)));
        }
        Ok(SynthConfig {
            num_classes: s.num_classes,
            samples_per_class: s.samples_per_class,
            ambient_dim: s.ambient_dim,
            cluster_std: s.cluster_std,
            mean_separation: s.mean_separation,
            latent_dim: (s.latent_dim > 0).then_some(s.latent_dim),
            seed,
        })
    }

    pub fn activation(&self) -> Result<Activation, CliError> {
        Activation::parse(&self.model.activation)
            .ok_or_else(|| bad("model.activation", format!("unknown activation {:?}", self.model.activation)))
    }

    pub fn pretrain_selftrain(&self) -> Result<bool, CliError> {
        match self.pretrain.method.as_str() {
            "selftrain" => Ok(true),
            "base" => Ok(false),
            m => Err(bad("pretrain.method", format!("{m:?} is not `base` or `selftrain`"))),
        }
    }

    pub fn ssl(&self) -> Result<SSLConfig, CliError> {
        let p = &self.pretrain;
        let cfg = SSLConfig {
            epochs: p.epochs,
            batch_labeled: p.batch_labeled,
            batch_unlabeled: p.batch_unlabeled,
            lr: p.lr,
            alpha: p.alpha,
            beta: p.beta,
            tau: p.tau,
            sigma_weak: p.sigma_weak,
            sigma_strong: p.sigma_strong,
            seed: 0,
        };
        cfg.validate().map_err(|e| bad("pretrain", e))?;
        Ok(cfg)
    }

    fn head(&self) -> Result<Head, CliError> {
        let p = &self.plml;
        let normalization = match p.normalization.as_str() {
            "softmax" => ScoreNormalization::Softmax,
            "rowsum" => ScoreNormalization::RowSum,
            n => return Err(bad("plml.normalization", format!("{n:?} is not `softmax` or `rowsum`"))),
        };
        for (key, a) in [("plml.alpha_embed", p.alpha_embed), ("plml.alpha_label", p.alpha_label)] {
            if !(0.0..1.0).contains(&a) {
                return Err(bad(key, "must lie in [0, 1)"));
            }
        }
        match Head::parse(&p.head) {
            Some(Head::Ep(_)) => Ok(Head::Ep(EpConfig { alpha_embed: p.alpha_embed, alpha_label: p.alpha_label, normalization })),
            Some(h) => Ok(h),
            None => Err(bad("plml.head", format!("{:?} is not `proto`, `ep` or `semiproto`", p.head))),
        }
    }

    /// EP settings shared by meta-training and evaluation.
    pub fn ep(&self) -> Result<EpConfig, CliError> {
        match self.head()? {
            Head::Ep(c) => Ok(c),
            _ => Ok(EpConfig { alpha_embed: self.plml.alpha_embed, alpha_label: self.plml.alpha_label, ..EpConfig::default() }),
        }
    }

    pub fn plml(&self) -> Result<PLMLConfig, CliError> {
        let p = &self.plml;
        let mut spec = EpisodeSpec::new(p.ways, p.shots, p.queries);
        if p.unlabeled > 0 {
            spec = spec.with_unlabeled(p.unlabeled, UnlabeledMode::Practical);
        }
        Ok(PLMLConfig {
            episodes_per_epoch: p.episodes_per_epoch,
            epochs: p.epochs,
            lr: p.lr,
            patience: p.patience,
            decay: p.decay,
            gamma: p.gamma,
            spec,
            head: self.head()?,
            val_episodes: p.val_episodes,
            seed: 0,
        })
    }

    pub fn modes(&self) -> Result<Vec<InferenceMode>, CliError> {
        if self.eval.modes.is_empty() {
            return Err(bad("eval.modes", "needs at least one mode"));
        }
        self.eval
            .modes
            .iter()
            .map(|m| m.parse::<InferenceMode>().map_err(|e| bad("eval.modes", e)))
            .collect()
    }

    pub fn variants(&self) -> Result<Vec<Variant>, CliError> {
        if self.eval.variants.is_empty() {
            return Err(bad("eval.variants", "needs at least one variant"));
        }
        self.eval
            .variants
            .iter()
            .map(|v| Variant::parse(v).ok_or_else(|| bad("eval.variants", format!("{v:?} is not `base` or `plml`"))))
            .collect()
    }

    pub fn eval_spec(&self) -> Result<EpisodeSpec, CliError> {
        let e = &self.eval;
        let spec = EpisodeSpec::new(e.ways, e.shots, e.queries);
        spec.validate().map_err(|err| bad("eval", err))?;
        Ok(spec)
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, CliError> {
        Ok(PipelineConfig {
            n_test: self.split.n_test,
            widths: self.model.widths.clone(),
            activation: self.activation()?,
            ssl: self.ssl()?,
            plml: self.plml()?,
            eval_spec: self.eval_spec()?,
            episodes: self.eval.episodes,
            unlabeled: self.eval.unlabeled,
        })
    }
}
