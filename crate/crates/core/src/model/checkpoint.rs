//! Named-tensor checkpoint file.
//!
//! Layout (little-endian): `FSLC`, u32 version, u32 tensor count, then for
//! each tensor: u16 name length + UTF-8 name, u32 rank, rank × u64 dims,
//! f32 payload. Everything after the last tensor is a UTF-8 block of
//! `key=value` lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Activation, BaseClassifier, Backbone, Linear, Model, ModelError};
use crate::diffmath::Array;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FSLC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Snapshot of `model`. Architecture keys (`widths`, `activation`) are
    /// added to `metadata` so the model can be rebuilt without a config.
    pub fn from_model(model: &Model, mut metadata: BTreeMap<String, String>) -> Self {
        let tensors = model
            .params()
            .into_iter()
            .map(|(name, a)| Tensor {
                name,
                dims: vec![a.nrows(), a.ncols()],
                data: a.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        let widths = model.backbone.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        metadata.insert("widths".into(), widths);
        metadata.insert("activation".into(), model.backbone.activation.as_str().into());
        Self { tensors, metadata }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copies tensors into an existing architecture, checking names and shapes.
    pub fn load_into(&self, model: &mut Model) -> Result<(), ModelError> {
        for (name, param) in model.params_mut() {
            let t = self.tensor(&name).ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            let expected = vec![param.nrows(), param.ncols()];
            if t.dims != expected {
                return Err(ModelError::TensorShape { name, found: t.dims.clone(), expected });
            }
            for (dst, src) in param.iter_mut().zip(&t.data) {
                *dst = f64::from(*src);
            }
        }
        Ok(())
    }

    /// Rebuilds a model from the stored architecture metadata.
    pub fn to_model(&self) -> Result<Model, ModelError> {
        let widths: Vec<usize> = self
            .metadata
            .get("widths")
            .ok_or_else(|| ModelError::Architecture("checkpoint metadata lacks `widths`".into()))?
            .split(',')
            .map(|w| w.trim().parse().map_err(|_| ModelError::Architecture(format!("bad width {w:?}"))))
            .collect::<Result<_, _>>()?;
        let activation = self
            .metadata
            .get("activation")
            .and_then(|a| Activation::parse(a))
            .ok_or_else(|| ModelError::Architecture("checkpoint metadata lacks a valid `activation`".into()))?;
        let classifier = self
            .tensor("classifier.weight")
            .ok_or_else(|| ModelError::MissingTensor("classifier.weight".into()))?;
        let num_base = classifier.dims.first().copied().unwrap_or(0);
        if widths.len() < 2 || num_base == 0 {
            return Err(ModelError::Architecture(format!("widths {widths:?}, {num_base} base classes")));
        }
        let zero = |i: usize, o: usize| Linear { weight: Array::zeros((o, i)), bias: Array::zeros((1, o)) };
        let mut model = Model {
            backbone: Backbone {
                layers: widths.windows(2).map(|w| zero(w[0], w[1])).collect(),
                widths: widths.clone(),
                activation,
            },
            classifier: BaseClassifier { layer: zero(*widths.last().unwrap(), num_base) },
        };
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Returns a warning when the stored config hash differs from `expected`.
    /// Loading is never blocked by this.
    pub fn config_hash_warning(&self, expected: &str) -> Option<String> {
        match self.metadata.get("config_hash") {
            Some(h) if h == expected => None,
            Some(h) => Some(format!("checkpoint config hash {h} differs from current {expected}")),
            None => Some("checkpoint has no config hash".into()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let len = u16::try_from(t.name.len()).map_err(|_| ModelError::Architecture(format!("name too long: {}", t.name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(ModelError::Architecture(format!("metadata entry {k:?} cannot be encoded")));
            }
            out.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8], ModelError> {
            if bytes.len() - pos < n {
                return Err(ModelError::Parse { offset: pos as u64, detail: format!("truncated while reading {what}") });
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let magic: [u8; 4] = take(4, "magic")?.try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(ModelError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let count = u32::from_le_bytes(take(4, "tensor count")?.try_into().unwrap());
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = u16::from_le_bytes(take(2, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(len, "name")?)
                .map_err(|e| ModelError::Parse { offset: 0, detail: format!("tensor name: {e}") })?
                .to_string();
            let rank = u32::from_le_bytes(take(4, "rank")?.try_into().unwrap()) as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(take(8, "dim")?.try_into().unwrap()) as usize);
            }
            let numel: usize = dims.iter().product();
            let raw = take(numel * 4, "payload")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor { name, dims, data });
        }
        let rest = &bytes[pos..];
        let text = std::str::from_utf8(rest)
            .map_err(|e| ModelError::Parse { offset: pos as u64, detail: format!("metadata is not UTF-8: {e}") })?;
        let mut metadata = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Parse { offset: pos as u64, detail: format!("metadata line {line:?}") })?;
            metadata.insert(k.to_string(), v.to_string());
        }
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> BTreeMap<String, String> {
        [("epoch".to_string(), "3".to_string()), ("config_hash".to_string(), "abc".to_string())].into()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = Model::init(&[4, 5, 3], 2, Activation::Relu, 2).unwrap();
        let bytes = Checkpoint::from_model(&m, meta()).to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.to_model().unwrap(), m);
        assert_eq!(back.metadata["epoch"], "3");
    }

    #[test]
    fn mismatched_architecture_names_tensor() {
        let m = Model::init(&[4, 5, 3], 2, Activation::Relu, 2).unwrap();
        let ck = Checkpoint::from_model(&m, meta());
        let mut other = Model::init(&[4, 6, 3], 2, Activation::Relu, 2).unwrap();
        match ck.load_into(&mut other) {
            Err(ModelError::TensorShape { name, .. }) => assert_eq!(name, "backbone.0.weight"),
            r => panic!("unexpected {r:?}"),
        }
        let mut deeper = Model::init(&[4, 5, 3, 3], 2, Activation::Relu, 2).unwrap();
        match ck.load_into(&mut deeper) {
            Err(ModelError::MissingTensor(name)) => assert_eq!(name, "backbone.2.weight"),
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn version_and_magic_checked() {
        let m = Model::init(&[2, 2], 2, Activation::Relu, 2).unwrap();
        let mut bytes = Checkpoint::from_model(&m, meta()).to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(ModelError::Version { found: 9, .. })));
        bytes[0] = 0;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(ModelError::BadMagic(_))));
    }

    #[test]
    fn config_hash_mismatch_only_warns() {
        let m = Model::init(&[2, 2], 2, Activation::Relu, 2).unwrap();
        let ck = Checkpoint::from_model(&m, meta());
        assert!(ck.config_hash_warning("abc").is_none());
        assert!(ck.config_hash_warning("xyz").is_some());
        assert!(ck.to_model().is_ok());
    }
}
