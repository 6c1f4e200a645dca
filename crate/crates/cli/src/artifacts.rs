//! Small text artifacts passed between commands, and the per-command manifest.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::Serialize;

use plml::datastore::{ClassPartition, Dataset, SemiSplit, UnlabeledPool};
use plml::rng::sha256_hex;
use plml::trainers::{PseudoLabel, PseudoLabeledSet};

use crate::CliError;

fn failed(stage: &'static str, detail: impl std::fmt::Display) -> CliError {
    CliError::Failed { stage, detail: detail.to_string() }
}

pub fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingInput(format!("{what} {}", path.display())))
    }
}

pub fn read(path: &Path, what: &str) -> Result<Vec<u8>, CliError> {
    require(path, what)?;
    std::fs::read(path).map_err(|e| CliError::MissingInput(format!("{what} {}: {e}", path.display())))
}

pub fn write(path: &Path, bytes: &[u8], stage: &'static str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| failed(stage, format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| failed(stage, format!("{}: {e}", path.display())))
}

fn class_index(ds: &Dataset) -> HashMap<&str, usize> {
    ds.class_names().iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect()
}

/// `class,role` with role in `base`, `val`, `novel`.
pub fn partition_csv(ds: &Dataset, p: &ClassPartition) -> Vec<u8> {
    let mut out = String::from("class,role\n");
    for (role, classes) in [("base", &p.base), ("val", &p.val), ("novel", &p.novel)] {
        for &c in classes {
            out.push_str(&format!("{},{role}\n", ds.class_names()[c]));
        }
    }
    out.into_bytes()
}

pub fn read_partition(ds: &Dataset, bytes: &[u8]) -> Result<ClassPartition, CliError> {
    let index = class_index(ds);
    let mut rd = csv::Reader::from_reader(bytes);
    let (mut base, mut val, mut novel) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rd.records() {
        let rec = rec.map_err(|e| failed("partition", e))?;
        let c = *index.get(&rec[0]).ok_or_else(|| failed("partition", format!("unknown class {:?}", &rec[0])))?;
        match &rec[1] {
            "base" => base.push(c),
            "val" => val.push(c),
            "novel" => novel.push(c),
            r => return Err(failed("partition", format!("unknown role {r:?}"))),
        }
    }
    ClassPartition::new(base, val, novel).map_err(|e| failed("partition", e))
}

/// `id,role,label`; the label column is empty for unlabeled rows.
pub fn split_csv(ds: &Dataset, split: &SemiSplit) -> Vec<u8> {
    let mut out = String::from("id,role,label\n");
    for &(r, c) in split.labeled() {
        out.push_str(&format!("{},labeled,{}\n", ds.id(r), ds.class_names()[c]));
    }
    for &r in split.unlabeled_rows() {
        out.push_str(&format!("{},unlabeled,\n", ds.id(r)));
    }
    for &(r, c) in split.test() {
        out.push_str(&format!("{},test,{}\n", ds.id(r), ds.class_names()[c]));
    }
    out.into_bytes()
}

pub fn read_split(ds: &Dataset, bytes: &[u8]) -> Result<SemiSplit, CliError> {
    let index = class_index(ds);
    let mut rd = csv::Reader::from_reader(bytes);
    let (mut labeled, mut unlabeled, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rd.records() {
        let rec = rec.map_err(|e| failed("split", e))?;
        let row = ds.row_of(&rec[0]).ok_or_else(|| failed("split", format!("unknown sample id {:?}", &rec[0])))?;
        let class = || index.get(&rec[2]).copied().ok_or_else(|| failed("split", format!("unknown class {:?}", &rec[2])));
        match &rec[1] {
            "labeled" => labeled.push((row, class()?)),
            "test" => test.push((row, class()?)),
            "unlabeled" => unlabeled.push(row),
            r => return Err(failed("split", format!("unknown role {r:?}"))),
        }
    }
    let pool = UnlabeledPool::sealed(unlabeled, |r| ds.label(r));
    SemiSplit::from_parts(labeled, pool, test).map_err(|e| failed("split", e))
}

/// `# source=<model digest>` then `id,pseudo_label,confidence`, labels as
/// class names.
pub fn pseudo_csv(ds: &Dataset, set: &PseudoLabeledSet, base: &[usize]) -> Vec<u8> {
    let mut out = format!("# source={}\nid,pseudo_label,confidence\n", set.source_hash);
    for it in &set.items {
        out.push_str(&format!("{},{},{}\n", ds.id(it.row), ds.class_names()[base[it.label]], it.confidence));
    }
    out.into_bytes()
}

pub fn read_pseudo(ds: &Dataset, bytes: &[u8], base: &[usize]) -> Result<PseudoLabeledSet, CliError> {
    let text = std::str::from_utf8(bytes).map_err(|e| failed("pseudo-labels", e))?;
    let (first, body) = text.split_once('\n').unwrap_or((text, ""));
    let source_hash = first
        .strip_prefix("# source=")
        .ok_or_else(|| failed("pseudo-labels", "first line must be `# source=<hash>`"))?
        .trim()
        .to_string();
    let base_of: HashMap<usize, usize> = base.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let index = class_index(ds);
    let mut rd = csv::Reader::from_reader(body.as_bytes());
    let mut items = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| failed("pseudo-labels", e))?;
        let row = ds.row_of(&rec[0]).ok_or_else(|| failed("pseudo-labels", format!("unknown sample id {:?}", &rec[0])))?;
        let label = index
            .get(&rec[1])
            .and_then(|c| base_of.get(c))
            .copied()
            .ok_or_else(|| failed("pseudo-labels", format!("{:?} is not a base class", &rec[1])))?;
        let confidence = rec[2].parse().map_err(|_| failed("pseudo-labels", format!("bad confidence {:?}", &rec[2])))?;
        items.push(PseudoLabel { row, label, confidence });
    }
    Ok(PseudoLabeledSet { items, source_hash })
}

/// Provenance of one command run. Files are keyed by name so the manifest
/// does not depend on where the output directory lives.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &'static str, config_hash: String, seed: u64) -> Self {
        Self { command, config_hash, seed, inputs: BTreeMap::new(), outputs: BTreeMap::new() }
    }

    fn key(path: &Path) -> String {
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    }

    pub fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.insert(Self::key(path), sha256_hex(bytes));
    }

    pub fn output(&mut self, path: &Path, bytes: &[u8]) {
        self.outputs.insert(Self::key(path), sha256_hex(bytes));
    }

    pub fn save(&self, out_dir: &Path) -> Result<PathBuf, CliError> {
        let path = out_dir.join(format!("{}.manifest.json", self.command));
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write(&path, text.as_bytes(), self.command)?;
        Ok(path)
    }
}
