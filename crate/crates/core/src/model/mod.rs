//! Feature extractor and base classifier.

mod checkpoint;

use rand::Rng as _;
use thiserror::Error;

use crate::diffmath::{sgd_step, Array, Gradients, MathError, Tape, Var};
use crate::rng;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("input width {got}, model expects {expected}")]
    Width { got: usize, expected: usize },
    #[error("checkpoint parse error at byte offset {offset}: {detail}")]
    Parse { offset: u64, detail: String },
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {found:?}, architecture expects {expected:?}")]
    TensorShape { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Self::Relu),
            "identity" => Some(Self::Identity),
            _ => None,
        }
    }
}

/// Affine layer `y = x · weightᵀ + bias`, weight stored out×in.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array,
    pub bias: Array,
}

impl Linear {
    /// Uniform in `±1/√fan_in`, rounded to f32 so checkpoints reproduce it exactly.
    fn init(fan_in: usize, fan_out: usize, r: &mut rng::Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |_| f64::from(r.random_range(-bound..bound) as f32);
        let weight = Array::from_shape_fn((fan_out, fan_in), &mut draw);
        let bias = Array::from_shape_fn((1, fan_out), &mut draw);
        Self { weight, bias }
    }
}

/// MLP feature extractor. The activation follows every layer but the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub widths: Vec<usize>,
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseClassifier {
    pub layer: Linear,
}

/// Feature extractor plus base-class classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub classifier: BaseClassifier,
}

/// Parameter handles of a [`Model`] registered on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    layers: Vec<(Var, Var)>,
    classifier: (Var, Var),
}

impl Model {
    /// `widths = [d_in, h_1, …, d_out]`, classifier over `num_base` classes.
    pub fn init(widths: &[usize], num_base: usize, activation: Activation, seed: u64) -> Result<Self, ModelError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(ModelError::Architecture(format!("widths {widths:?}")));
        }
        if num_base == 0 {
            return Err(ModelError::Architecture("base classifier needs at least one class".into()));
        }
        let mut r = rng::stream(seed, "init", &[]);
        let layers = widths.windows(2).map(|w| Linear::init(w[0], w[1], &mut r)).collect();
        let classifier = BaseClassifier { layer: Linear::init(*widths.last().unwrap(), num_base, &mut r) };
        Ok(Self { backbone: Backbone { widths: widths.to_vec(), layers, activation }, classifier })
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.widths[0]
    }

    pub fn embed_dim(&self) -> usize {
        *self.backbone.widths.last().unwrap()
    }

    pub fn num_base(&self) -> usize {
        self.classifier.layer.weight.nrows()
    }

    /// Parameters in a fixed order with unique names.
    pub fn params(&self) -> Vec<(String, &Array)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.layers.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &l.weight));
            out.push((format!("backbone.{i}.bias"), &l.bias));
        }
        out.push(("classifier.weight".into(), &self.classifier.layer.weight));
        out.push(("classifier.bias".into(), &self.classifier.layer.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Array)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.layers.iter_mut().enumerate() {
            out.push((format!("backbone.{i}.weight"), &mut l.weight));
            out.push((format!("backbone.{i}.bias"), &mut l.bias));
        }
        out.push(("classifier.weight".into(), &mut self.classifier.layer.weight));
        out.push(("classifier.bias".into(), &mut self.classifier.layer.bias));
        out
    }

    /// Registers every parameter as a named leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> Bound {
        let mut params = self.params().into_iter().map(|(n, a)| tape.param(&n, a.clone()));
        let layers = self.backbone.layers.iter().map(|_| (params.next().unwrap(), params.next().unwrap())).collect();
        let classifier = (params.next().unwrap(), params.next().unwrap());
        Bound { layers, classifier }
    }

    pub fn embed(&self, tape: &Tape, bound: &Bound, x: Var) -> Result<Var, ModelError> {
        let got = tape.shape(x).1;
        if got != self.input_dim() {
            return Err(ModelError::Width { got, expected: self.input_dim() });
        }
        let mut h = x;
        let last = bound.layers.len() - 1;
        for (i, &(w, b)) in bound.layers.iter().enumerate() {
            h = tape.linear(h, w, b)?;
            if i < last && self.backbone.activation == Activation::Relu {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Row-softmax over the base-class affine map.
    pub fn classify_base(&self, tape: &Tape, bound: &Bound, z: Var) -> Result<Var, ModelError> {
        let got = tape.shape(z).1;
        if got != self.embed_dim() {
            return Err(ModelError::Width { got, expected: self.embed_dim() });
        }
        let (w, b) = bound.classifier;
        Ok(tape.row_softmax(tape.linear(z, w, b)?)?)
    }

    /// Tape-free embedding of a batch.
    pub fn embed_array(&self, x: &Array) -> Result<Array, ModelError> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let z = self.embed(&tape, &bound, tape.constant(x.clone()))?;
        let out = tape.value(z).clone();
        Ok(out)
    }

    /// Tape-free base-class probabilities of a batch.
    pub fn base_probs(&self, x: &Array) -> Result<Array, ModelError> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let z = self.embed(&tape, &bound, tape.constant(x.clone()))?;
        let p = self.classify_base(&tape, &bound, z)?;
        let out = tape.value(p).clone();
        Ok(out)
    }

    /// One SGD step on every named parameter found in `grads`.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) -> Result<(), ModelError> {
        for (name, p) in self.params_mut() {
            if let Some(g) = grads.by_name(&name) {
                sgd_step(p, g, lr)?;
            }
        }
        Ok(())
    }

    /// Sum of squared parameters, the L2 regularizer.
    pub fn l2(&self, tape: &Tape, bound: &Bound) -> Result<Var, ModelError> {
        let mut acc: Option<Var> = None;
        for &(w, b) in bound.layers.iter().chain(std::iter::once(&bound.classifier)) {
            for v in [w, b] {
                let s = tape.sum_squares(v)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, s)?,
                    None => s,
                });
            }
        }
        Ok(acc.expect("model has parameters"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_final_layer_gives_zero_embeddings() {
        let mut m = Model::init(&[3, 4, 2], 2, Activation::Relu, 1).unwrap();
        let last = m.backbone.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        let z = m.embed_array(&array![[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]]).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer() {
        let mut m = Model::init(&[3, 3], 2, Activation::Identity, 1).unwrap();
        m.backbone.layers[0].weight = Array::eye(3);
        m.backbone.layers[0].bias.fill(0.0);
        let x = array![[1.0, -2.0, 0.5]];
        assert_eq!(m.embed_array(&x).unwrap(), x);
    }

    #[test]
    fn width_mismatch() {
        let m = Model::init(&[3, 2], 2, Activation::Relu, 1).unwrap();
        assert!(matches!(m.embed_array(&array![[1.0, 2.0]]), Err(ModelError::Width { got: 2, expected: 3 })));
    }

    #[test]
    fn classifier_zero_is_uniform_and_bias_dominates() {
        let mut m = Model::init(&[2, 2], 4, Activation::Identity, 1).unwrap();
        m.classifier.layer.weight.fill(0.0);
        m.classifier.layer.bias.fill(0.0);
        let x = array![[0.3, -1.0], [2.0, 5.0]];
        let p = m.base_probs(&x).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        m.classifier.layer.bias = array![[0.0, 0.0, 50.0, 0.0]];
        let p = m.base_probs(&x).unwrap();
        assert_eq!(crate::diffmath::argmax_rows(&p), vec![2, 2]);
    }

    #[test]
    fn classifier_matches_hand_affine_softmax() {
        let mut m = Model::init(&[2, 2], 2, Activation::Identity, 1).unwrap();
        m.backbone.layers[0].weight = Array::eye(2);
        m.backbone.layers[0].bias.fill(0.0);
        m.classifier.layer.weight = array![[1.0, 2.0], [0.0, -1.0]];
        m.classifier.layer.bias = array![[0.5, 0.0]];
        let p = m.base_probs(&array![[1.0, 1.0]]).unwrap();
        // logits 3.5 and -1.0
        let e = (-4.5f64).exp();
        assert!((p[[0, 0]] - 1.0 / (1.0 + e)).abs() < 1e-14);
        assert!((p[[0, 1]] - e / (1.0 + e)).abs() < 1e-14);
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(&[5, 6, 3], 4, Activation::Relu, 9).unwrap();
        assert_eq!(a, Model::init(&[5, 6, 3], 4, Activation::Relu, 9).unwrap());
        assert_ne!(a, Model::init(&[5, 6, 3], 4, Activation::Relu, 10).unwrap());
        let names: std::collections::HashSet<_> = a.params().into_iter().map(|p| p.0).collect();
        assert_eq!(names.len(), 6);
    }
}
