//! On-disk formats.
//!
//! Feature file (little-endian): `FSLF`, u32 version, u64 rows, u64 cols,
//! rows·cols f32 values row-major, then one id record per row (u16 byte
//! length followed by UTF-8). Label file: CSV with header `id,label`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{DataError, Dataset};

pub const FEATURE_MAGIC: [u8; 4] = *b"FSLF";
pub const FEATURE_VERSION: u32 = 1;

pub fn write_features(features: &Array2<f32>, ids: &[String]) -> Result<Vec<u8>, DataError> {
    if ids.len() != features.nrows() {
        return Err(DataError::Invalid(format!("{} rows but {} ids", features.nrows(), ids.len())));
    }
    let mut out = Vec::with_capacity(24 + features.len() * 4 + ids.len() * 8);
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(features.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(features.ncols() as u64).to_le_bytes());
    for v in features.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for id in ids {
        let len = u16::try_from(id.len()).map_err(|_| DataError::Invalid(format!("id too long: {id:?}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        if self.buf.len() - self.pos < n {
            return Err(DataError::Parse {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_features(bytes: &[u8]) -> Result<(Array2<f32>, Vec<String>), DataError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != FEATURE_MAGIC {
        return Err(DataError::BadMagic { found: magic, expected: FEATURE_MAGIC });
    }
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(DataError::Version { found: version, expected: FEATURE_VERSION });
    }
    let n = r.u64("row count")? as usize;
    let d = r.u64("column count")? as usize;
    let total = n.checked_mul(d).and_then(|c| c.checked_mul(4)).ok_or_else(|| DataError::Parse {
        offset: r.pos as u64,
        detail: format!("implausible shape {n}x{d}"),
    })?;
    let payload = r.take(total, "feature payload")?;
    let values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let features = Array2::from_shape_vec((n, d), values).expect("payload length checked");
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u16("id length")? as usize;
        let at = r.pos;
        let raw = r.take(len, "id bytes")?;
        let id = std::str::from_utf8(raw)
            .map_err(|e| DataError::Parse { offset: at as u64, detail: format!("id is not UTF-8: {e}") })?;
        ids.push(id.to_string());
    }
    if r.pos != bytes.len() {
        return Err(DataError::Parse { offset: r.pos as u64, detail: "trailing bytes after id records".into() });
    }
    Ok((features, ids))
}

/// `id,label` rows, label given by class name.
pub fn write_labels(ids: &[String], names: impl Iterator<Item = String>) -> Result<Vec<u8>, DataError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "label"])?;
    for (id, name) in ids.iter().zip(names) {
        w.write_record([id.as_str(), name.as_str()])?;
    }
    w.into_inner().map_err(|e| DataError::Io(e.into_error()))
}

pub fn read_labels(bytes: &[u8]) -> Result<Vec<(String, String)>, DataError> {
    let mut rd = csv::Reader::from_reader(bytes);
    let headers = rd.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "id" || &headers[1] != "label" {
        return Err(DataError::Invalid(format!("label file header must be `id,label`, got {headers:?}")));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        out.push((rec[0].to_string(), rec[1].to_string()));
    }
    Ok(out)
}

pub fn save_dataset(dataset: &Dataset, feature_path: &Path, label_path: &Path) -> Result<(), DataError> {
    fs::write(feature_path, write_features(dataset.features(), dataset.sample_ids())?)?;
    let names = dataset.labels().iter().map(|&l| dataset.class_names()[l].clone());
    fs::write(label_path, write_labels(dataset.sample_ids(), names)?)?;
    Ok(())
}

/// Class indices follow the sorted order of distinct label names.
pub fn load_dataset(feature_path: &Path, label_path: &Path) -> Result<Dataset, DataError> {
    let (features, ids) = read_features(&fs::read(feature_path)?)?;
    let rows = read_labels(&fs::read(label_path)?)?;
    dataset_from_parts(features, ids, rows)
}

pub(crate) fn dataset_from_parts(
    features: Array2<f32>,
    ids: Vec<String>,
    rows: Vec<(String, String)>,
) -> Result<Dataset, DataError> {
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    if index.len() != ids.len() {
        let mut seen = BTreeSet::new();
        let dup = ids.iter().find(|id| !seen.insert(id.as_str())).cloned().unwrap_or_default();
        return Err(DataError::DuplicateId(dup));
    }
    let names: Vec<String> = rows.iter().map(|r| r.1.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut labels = vec![usize::MAX; ids.len()];
    for (id, name) in &rows {
        let row = *index.get(id.as_str()).ok_or_else(|| DataError::UnknownId(id.clone()))?;
        if labels[row] != usize::MAX {
            return Err(DataError::DuplicateId(id.clone()));
        }
        labels[row] = names.binary_search(name).expect("name collected above");
    }
    if rows.len() != ids.len() {
        return Err(DataError::Invalid(format!(
            "row-count mismatch: {} feature rows, {} label rows",
            ids.len(),
            rows.len()
        )));
    }
    Dataset::new(features, labels, names, ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{make_synthetic, SynthConfig};

    fn small() -> Dataset {
        make_synthetic(&SynthConfig { num_classes: 3, samples_per_class: 4, ambient_dim: 3, seed: 5, ..Default::default() })
            .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let (f, l) = (dir.path().join("x.fslf"), dir.path().join("y.csv"));
        save_dataset(&ds, &f, &l).unwrap();
        let back = load_dataset(&f, &l).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn truncated_names_offset() {
        let ds = small();
        let bytes = write_features(ds.features(), ds.sample_ids()).unwrap();
        let err = read_features(&bytes[..30]).unwrap_err();
        match err {
            DataError::Parse { offset, .. } => assert_eq!(offset, 24),
            e => panic!("unexpected {e}"),
        }
        assert!(err_string(&bytes[..30]).contains("offset 24"));
    }

    fn err_string(b: &[u8]) -> String {
        read_features(b).unwrap_err().to_string()
    }

    #[test]
    fn header_errors() {
        let ds = small();
        let mut bytes = write_features(ds.features(), ds.sample_ids()).unwrap();
        bytes[4] = 2;
        assert!(matches!(read_features(&bytes), Err(DataError::Version { found: 2, expected: 1 })));
        bytes[0] = b'X';
        assert!(matches!(read_features(&bytes), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn label_errors() {
        let (f, ids) = (Array2::<f32>::zeros((2, 1)), vec!["a".to_string(), "b".to_string()]);
        let unknown = vec![("a".into(), "x".into()), ("zzz".into(), "y".into())];
        assert!(matches!(dataset_from_parts(f.clone(), ids.clone(), unknown), Err(DataError::UnknownId(_))));
        let short = vec![("a".into(), "x".into())];
        assert!(matches!(dataset_from_parts(f.clone(), ids, short), Err(DataError::Invalid(_))));
        let dup_ids = vec!["a".to_string(), "a".to_string()];
        assert!(matches!(dataset_from_parts(f, dup_ids, vec![]), Err(DataError::DuplicateId(_))));
    }
}
